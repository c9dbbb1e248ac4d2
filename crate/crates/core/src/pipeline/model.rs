use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::dataset::PatientRecord;
use crate::blocks::IfmBlock;
use crate::error::{Error, Result};
use crate::fusion::{fuse_aligned_var, survival_nll_var, AlphaParam, HazardHead, HazardOutput};
use crate::hierarchy::{GenomicsEncoder, GroupingConfig, Him, HistologyEncoder};
use crate::numerics::{Graph, ParamStore, Var};

/// Anything that maps a patient to a scalar risk (higher = worse).
pub trait RiskModel: Sync {
    fn risk(&self, record: &PatientRecord) -> Result<f64>;
}

impl<F> RiskModel for F
where
    F: Fn(&PatientRecord) -> f64 + Sync,
{
    fn risk(&self, record: &PatientRecord) -> Result<f64> {
        Ok(self(record))
    }
}

/// Encoders, one HIM per modality, fine and coarse IFM, the mixing weight
/// and the hazard head, all registered in one parameter store.
#[derive(Clone, Debug)]
pub struct SurvMambaModel {
    pub config: ModelConfig,
    pub grouping: GroupingConfig,
    pub d_raw: usize,
    pub store: ParamStore,
    pub histology_encoder: HistologyEncoder,
    pub genomics_encoder: GenomicsEncoder,
    pub him_histology: Him,
    pub him_genomics: Him,
    pub ifm_fine: IfmBlock,
    pub ifm_coarse: IfmBlock,
    pub alpha: AlphaParam,
    pub head: HazardHead,
}

impl SurvMambaModel {
    pub fn new(config: &ModelConfig, d_raw: usize, grouping: &GroupingConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if d_raw == 0 {
            return Err(Error::config("histology feature dim must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dims = config.dims();
        let (d, mode) = (config.d, config.mode);
        let histology_encoder = HistologyEncoder::new(&mut store, "hist.encoder", d_raw, d, &mut rng)?;
        let genomics_encoder = GenomicsEncoder::new(&mut store, "gen.encoder", grouping, config.hidden, d, &mut rng)?;
        let him_histology = Him::new(&mut store, "hist.him", dims, config.depth, config.pool, mode, &mut rng)?;
        let him_genomics = Him::new(&mut store, "gen.him", dims, config.depth, config.pool, mode, &mut rng)?;
        let ifm_fine = IfmBlock::new(&mut store, "ifm.fine", dims, mode, &mut rng)?;
        let ifm_coarse = IfmBlock::new(&mut store, "ifm.coarse", dims, mode, &mut rng)?;
        let alpha = AlphaParam::new(&mut store, "alpha", config.alpha_init)?;
        let head = HazardHead::new(&mut store, "head", d, config.t_bins, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            grouping: grouping.clone(),
            d_raw,
            store,
            histology_encoder,
            genomics_encoder,
            him_histology,
            him_genomics,
            ifm_fine,
            ifm_coarse,
            alpha,
            head,
        })
    }

    /// Hazards `[1, 1, T]` for one patient, reading parameters from `store`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, record: &PatientRecord) -> Result<Var> {
        let hist = self.histology_encoder.forward(g, store, &record.histology)?;
        let gen = self
            .genomics_encoder
            .forward(g, store, &record.expression, &self.grouping)?;

        let hist_fine = self.him_histology.fine_forward(g, store, &hist)?;
        let gen_fine = self.him_genomics.fine_forward(g, store, &gen)?;
        let hist_coarse = self.him_histology.coarse_forward(g, store, &hist_fine)?;
        let gen_coarse = self.him_genomics.coarse_forward(g, store, &gen_fine)?;

        let hist_tokens = g.concat_tokens(&hist_fine)?;
        let gen_tokens = g.concat_tokens(&gen_fine)?;
        let fine_len = self
            .config
            .align_len
            .min(g.shape(hist_tokens)[1])
            .min(g.shape(gen_tokens)[1]);
        let h_fine = fuse_aligned_var(g, store, &self.ifm_fine, hist_tokens, gen_tokens, fine_len)?;
        let coarse_len = hist.len().min(gen.len());
        let h_coarse = fuse_aligned_var(g, store, &self.ifm_coarse, hist_coarse, gen_coarse, coarse_len)?;

        let h = self.alpha.fuse(g, store, h_fine, h_coarse)?;
        self.head.forward(g, store, h)
    }

    /// Scalar survival NLL for one patient.
    pub fn loss(&self, g: &mut Graph, store: &ParamStore, record: &PatientRecord) -> Result<Var> {
        let hazards = self.forward(g, store, record)?;
        survival_nll_var(g, hazards, record.t_bin, record.censored)
    }

    pub fn predict(&self, record: &PatientRecord) -> Result<HazardOutput> {
        let mut g = Graph::new();
        let hz = self.forward(&mut g, &self.store, record)?;
        Ok(HazardOutput::from_hazards(g.value(hz).data().to_vec()))
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }
}

impl RiskModel for SurvMambaModel {
    fn risk(&self, record: &PatientRecord) -> Result<f64> {
        Ok(self.predict(record)?.risk)
    }
}
