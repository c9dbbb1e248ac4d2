//! Concordance, Kaplan-Meier, log-rank, and median risk stratification.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalOutcome {
    /// Months, strictly positive.
    pub time: f64,
    /// `true` when death was observed.
    pub event: bool,
}

impl SurvivalOutcome {
    pub fn new(time: f64, event: bool) -> Result<Self> {
        if !(time > 0.0) || !time.is_finite() {
            return Err(Error::config(format!("survival time must be positive, got {time}")));
        }
        Ok(Self { time, event })
    }

    /// From a censoring flag (`censored = true` means alive at last follow-up).
    pub fn from_censored(time: f64, censored: bool) -> Result<Self> {
        Self::new(time, !censored)
    }
}

/// Integer tallies behind a c-index.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConcordanceCounts {
    pub comparable: u64,
    pub concordant: u64,
    pub tied_risk: u64,
}

impl ConcordanceCounts {
    pub fn index(&self) -> Result<f64> {
        if self.comparable == 0 {
            return Err(Error::Undefined("c-index has no comparable pairs".into()));
        }
        Ok((self.concordant as f64 + 0.5 * self.tied_risk as f64) / self.comparable as f64)
    }
}

/// Fenwick tree over risk ranks.
struct RankCounter {
    tree: Vec<u64>,
}

impl RankCounter {
    fn new(n: usize) -> Self {
        Self { tree: vec![0; n + 1] }
    }

    fn add(&mut self, rank: usize) {
        let mut i = rank + 1;
        while i < self.tree.len() {
            self.tree[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Number of inserted ranks `< rank`.
    fn below(&self, rank: usize) -> u64 {
        let mut i = rank;
        let mut acc = 0;
        while i > 0 {
            acc += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        acc
    }
}

/// Harrell's pair counts in `O(n log n)`.
///
/// A pair `(i, j)` is comparable when `time_i < time_j` and `i` had an event;
/// it is concordant when `risk_i > risk_j`, and a risk tie counts half.
pub fn concordance_counts(risks: &[f64], outcomes: &[SurvivalOutcome]) -> Result<ConcordanceCounts> {
    if risks.len() != outcomes.len() {
        return Err(Error::dim("concordance_index", &[risks.len()], &[outcomes.len()]));
    }
    if risks.iter().any(|r| r.is_nan()) {
        return Err(Error::Evaluation("NaN risk score".into()));
    }
    let n = risks.len();
    // dense rank of each risk value
    let mut sorted: Vec<f64> = risks.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    sorted.dedup();
    let rank_of = |r: f64| sorted.partition_point(|&v| v < r);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| outcomes[b].time.total_cmp(&outcomes[a].time));

    let mut later = RankCounter::new(sorted.len());
    let mut inserted = 0u64;
    let mut counts = ConcordanceCounts::default();
    let mut start = 0;
    while start < n {
        let t = outcomes[order[start]].time;
        let end = start + order[start..].iter().take_while(|&&i| outcomes[i].time == t).count();
        for &i in &order[start..end] {
            if !outcomes[i].event {
                continue;
            }
            let rank = rank_of(risks[i]);
            let lower = later.below(rank);
            let lower_or_equal = later.below(rank + 1);
            counts.comparable += inserted;
            counts.concordant += lower;
            counts.tied_risk += lower_or_equal - lower;
        }
        for &i in &order[start..end] {
            later.add(rank_of(risks[i]));
            inserted += 1;
        }
        start = end;
    }
    Ok(counts)
}

pub fn concordance_index(risks: &[f64], outcomes: &[SurvivalOutcome]) -> Result<f64> {
    concordance_counts(risks, outcomes)?.index()
}

/// Product-limit survival curve evaluated at each distinct event time.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
}

impl KmCurve {
    /// `S(t)`; 1 before the first event.
    pub fn survival_at(&self, t: f64) -> f64 {
        let idx = self.times.partition_point(|&v| v <= t);
        if idx == 0 {
            1.0
        } else {
            self.survival[idx - 1]
        }
    }
}

/// Subjects censored at an event time are still at risk at that time.
pub fn kaplan_meier(outcomes: &[SurvivalOutcome]) -> KmCurve {
    let mut sorted = outcomes.to_vec();
    sorted.sort_by(|a, b| a.time.total_cmp(&b.time));
    let mut curve = KmCurve::default();
    let mut at_risk = sorted.len();
    let mut s = 1.0;
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].time;
        let same = sorted[i..].iter().take_while(|o| o.time == t).count();
        let deaths = sorted[i..i + same].iter().filter(|o| o.event).count();
        if deaths > 0 {
            s *= (at_risk - deaths) as f64 / at_risk as f64;
            curve.times.push(t);
            curve.survival.push(s);
            curve.at_risk.push(at_risk);
            curve.events.push(deaths);
        }
        at_risk -= same;
        i += same;
    }
    curve
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRankResult {
    pub chi2: f64,
    pub p_value: f64,
    pub observed_a: f64,
    pub expected_a: f64,
    pub variance: f64,
    /// Set when the statistic is undefined (no events, or no variance).
    pub degenerate: bool,
}

/// Two-group log-rank test with one degree of freedom.
pub fn logrank_test(group_a: &[SurvivalOutcome], group_b: &[SurvivalOutcome]) -> Result<LogRankResult> {
    if group_a.is_empty() || group_b.is_empty() {
        return Err(Error::config("log-rank test needs two non-empty groups"));
    }
    let mut pooled: Vec<(f64, bool, bool)> = group_a
        .iter()
        .map(|o| (o.time, o.event, true))
        .chain(group_b.iter().map(|o| (o.time, o.event, false)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));

    let (mut n_a, mut n_b) = (group_a.len() as f64, group_b.len() as f64);
    let (mut observed, mut expected, mut variance) = (0.0, 0.0, 0.0);
    let mut i = 0;
    while i < pooled.len() {
        let t = pooled[i].0;
        let same = pooled[i..].iter().take_while(|p| p.0 == t).count();
        let block = &pooled[i..i + same];
        let d_a = block.iter().filter(|p| p.1 && p.2).count() as f64;
        let d = block.iter().filter(|p| p.1).count() as f64;
        let n = n_a + n_b;
        if d > 0.0 {
            observed += d_a;
            expected += d * n_a / n;
            if n > 1.0 {
                variance += d * (n_a / n) * (n_b / n) * (n - d) / (n - 1.0);
            }
        }
        n_a -= block.iter().filter(|p| p.2).count() as f64;
        n_b -= block.iter().filter(|p| !p.2).count() as f64;
        i += same;
    }
    if variance <= 0.0 {
        return Ok(LogRankResult {
            chi2: 0.0,
            p_value: 1.0,
            observed_a: observed,
            expected_a: expected,
            variance,
            degenerate: true,
        });
    }
    let chi2 = (observed - expected).powi(2) / variance;
    Ok(LogRankResult {
        chi2,
        p_value: chi2_sf(chi2, 1.0),
        observed_a: observed,
        expected_a: expected,
        variance,
        degenerate: false,
    })
}

/// Survival function of the chi-square distribution.
pub fn chi2_sf(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    gamma_q(0.5 * df, 0.5 * x)
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos, g = 7
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let t = x + 7.5;
    let mut acc = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized upper incomplete gamma `Q(a, x)`: series below `a + 1`,
/// continued fraction above.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    const ITMAX: usize = 500;
    const EPS: f64 = 1e-15;
    if x <= 0.0 {
        return 1.0;
    }
    let prefactor = (-x + a * x.ln() - ln_gamma(a)).exp();
    if x < a + 1.0 {
        let (mut ap, mut sum) = (a, 1.0 / a);
        let mut del = sum;
        for _ in 0..ITMAX {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if del.abs() < sum.abs() * EPS {
                break;
            }
        }
        (1.0 - sum * prefactor).clamp(0.0, 1.0)
    } else {
        // modified Lentz
        let tiny = f64::MIN_POSITIVE / EPS;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..=ITMAX {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < EPS {
                break;
            }
        }
        (prefactor * h).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiskGroup {
    Low,
    High,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// `High` when strictly above the median, `Low` otherwise.
pub fn risk_stratify(risks: &[f64]) -> Result<Vec<RiskGroup>> {
    if risks.len() < 2 {
        return Err(Error::config("risk stratification needs at least two subjects"));
    }
    let m = median(risks).expect("non-empty");
    Ok(risks
        .iter()
        .map(|&r| match r.partial_cmp(&m) {
            Some(Ordering::Greater) => RiskGroup::High,
            _ => RiskGroup::Low,
        })
        .collect())
}
