//! Change-point segmentation of a contiguous power series into steps,
//! spikes and burst-then-step transitions.

use serde::{Deserialize, Serialize};

use super::{FdiConfig, FeatureKind};
use crate::units::Power;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub ts_ms: u64,
    pub power: Power,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeFeature {
    pub kind: FeatureKind,
    pub onset_ms: u64,
    /// Signed step, or the peak signed excursion for a spike.
    pub amplitude_w: f64,
    /// Transient length for spikes and bursts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
    pub pre_mean_w: f64,
    pub post_mean_w: f64,
}

impl ChangeFeature {
    pub fn amplitude(&self) -> Power {
        Power::from_watts(self.amplitude_w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Scan {
    /// No deviation anywhere in the series.
    NoChange,
    /// Too few samples to rule a change in or out.
    Pending,
    /// A deviation starts at `onset`; more samples are needed to classify it.
    Awaiting { onset: usize },
    /// `plateau` indexes the first sample of the settled post-change window;
    /// `end` is one past the last sample the decision used.
    Found {
        feature: ChangeFeature,
        onset: usize,
        plateau: usize,
        end: usize,
    },
}

/// Classifies the first change in `series`, if any can be decided.
pub fn segment(series: &[SeriesPoint], cfg: &FdiConfig) -> Option<ChangeFeature> {
    match scan(series, cfg) {
        Scan::Found { feature, .. } => Some(feature),
        _ => None,
    }
}

fn tick_ms(series: &[SeriesPoint]) -> u64 {
    series
        .windows(2)
        .map(|w| w[1].ts_ms.saturating_sub(w[0].ts_ms))
        .filter(|d| *d > 0)
        .min()
        .unwrap_or(1000)
}

/// Scans for the first onset `i >= window` whose sample leaves the preceding
/// window mean by more than theta, then looks for the first settled window
/// after it (all samples within theta of the window mean) no later than
/// `2 x spike_max` samples past the onset.
pub fn scan(series: &[SeriesPoint], cfg: &FdiConfig) -> Scan {
    let w = cfg.window_samples;
    let n = series.len();
    let theta = Power::from_watts(cfg.theta_w).milliwatts();
    let x: Vec<i64> = series.iter().map(|p| p.power.milliwatts()).collect();
    let tick = tick_ms(series);
    let spike_max_samples = ((cfg.spike_max_duration_s * 1000.0) / tick as f64).floor() as usize;
    let search = (2 * spike_max_samples).max(2);
    let wi = w as i64;

    if n < w + 1 {
        return Scan::Pending;
    }
    let settled = |p: usize| -> bool {
        let sum: i64 = x[p..p + w].iter().sum();
        x[p..p + w]
            .iter()
            .all(|v| (v * wi - sum).abs() <= theta * wi)
    };
    let mut ref_sum: i64 = x[..w].iter().sum();
    for i in w..n {
        if i > w {
            ref_sum += x[i - 1] - x[i - 1 - w];
        }
        if (x[i] * wi - ref_sum).abs() <= theta * wi {
            continue;
        }
        let mut plateau = None;
        for k in 0..=search {
            let p = i + k;
            if p + w > n {
                return Scan::Awaiting { onset: i };
            }
            if settled(p) {
                plateau = Some(p);
                break;
            }
        }
        let p = plateau.unwrap_or(i + search);
        let k = p - i;
        let ref_mean = ref_sum as f64 / w as f64;
        let post_sum: i64 = x[p..p + w].iter().sum();
        let post_mean = post_sum as f64 / w as f64;
        let delta_scaled = post_sum - ref_sum;
        let duration_s = (series[p].ts_ms - series[i].ts_ms) as f64 / 1000.0;
        let onset_ms = series[i].ts_ms;
        let end = p + w;

        let feature = if delta_scaled.abs() <= theta * wi {
            if k == 0 {
                continue;
            }
            let returned = (delta_scaled.abs() as f64) <= cfg.return_band_w * 1000.0 * w as f64;
            if !returned {
                continue;
            }
            // Peak signed excursion over the transient.
            let peak = x[i..p]
                .iter()
                .map(|v| *v as f64 - ref_mean)
                .fold(0.0f64, |acc, d| if d.abs() > acc.abs() { d } else { acc });
            ChangeFeature {
                kind: FeatureKind::Spike,
                onset_ms,
                amplitude_w: round_mw(peak),
                duration_s: Some(duration_s),
                pre_mean_w: round_mw(ref_mean),
                post_mean_w: round_mw(post_mean),
            }
        } else {
            let sign = delta_scaled.signum();
            let overshoot = x[i..p]
                .iter()
                .map(|v| (v * wi - post_sum) * sign)
                .max()
                .unwrap_or(i64::MIN);
            let burst = k >= 1 && overshoot as f64 > cfg.burst_factor * theta as f64 * w as f64;
            ChangeFeature {
                kind: if burst {
                    FeatureKind::BurstThenStep
                } else {
                    FeatureKind::Step
                },
                onset_ms,
                amplitude_w: round_mw(delta_scaled as f64 / w as f64),
                duration_s: burst.then_some(duration_s),
                pre_mean_w: round_mw(ref_mean),
                post_mean_w: round_mw(post_mean),
            }
        };
        return Scan::Found {
            feature,
            onset: i,
            plateau: p,
            end,
        };
    }
    if n < 2 * w {
        Scan::Pending
    } else {
        Scan::NoChange
    }
}

/// Milliwatt values to watts, rounded to the nearest milliwatt.
fn round_mw(mw: f64) -> f64 {
    (mw.round()) / 1000.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn series(values: &[f64]) -> Vec<SeriesPoint> {
        values
            .iter()
            .enumerate()
            .map(|(i, w)| SeriesPoint {
                ts_ms: i as u64 * 1000,
                power: Power::from_watts(*w),
            })
            .collect()
    }

    fn noisy(len: usize, seed: u64, f: impl Fn(usize) -> f64) -> Vec<SeriesPoint> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 0.02).unwrap();
        series(
            &(0..len)
                .map(|i| f(i) + n.sample(&mut rng))
                .collect::<Vec<_>>(),
        )
    }

    #[test]
    fn flat_noise_has_no_change() {
        let cfg = FdiConfig::default();
        for seed in 0..20 {
            let s = noisy(60, seed, |_| 45.8);
            assert_eq!(scan(&s, &cfg), Scan::NoChange, "seed {seed}");
        }
    }

    #[test]
    fn level_drop_is_step() {
        let cfg = FdiConfig::default();
        let s = noisy(60, 7, |i| if i < 30 { 45.8 } else { 45.45 });
        let f = segment(&s, &cfg).unwrap();
        assert_eq!(f.kind, FeatureKind::Step);
        assert_eq!(f.onset_ms, 30_000);
        assert!((f.amplitude_w + 0.35).abs() <= 0.02, "{}", f.amplitude_w);
        assert!(((f.post_mean_w - f.pre_mean_w) - f.amplitude_w).abs() <= 0.0015);
    }

    #[test]
    fn short_excursion_is_spike() {
        let cfg = FdiConfig::default();
        let s = series(
            &(0..40)
                .map(|i| if (20..23).contains(&i) { 46.8 } else { 45.8 })
                .collect::<Vec<_>>(),
        );
        let f = segment(&s, &cfg).unwrap();
        assert_eq!(f.kind, FeatureKind::Spike);
        assert_eq!(f.duration_s, Some(3.0));
        assert_eq!(f.amplitude_w, 1.0);
    }

    #[test]
    fn burst_then_plateau() {
        let cfg = FdiConfig::default();
        let s = series(
            &(0..40)
                .map(|i| match i {
                    0..=14 => 3.0,
                    15..=19 => 72.0,
                    _ => 60.0,
                })
                .collect::<Vec<_>>(),
        );
        match scan(&s, &cfg) {
            Scan::Found {
                feature, plateau, ..
            } => {
                assert_eq!(feature.kind, FeatureKind::BurstThenStep);
                assert_eq!(feature.amplitude_w, 57.0);
                assert_eq!(feature.duration_s, Some(5.0));
                assert_eq!(plateau, 20);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn undecided_until_post_window_complete() {
        let cfg = FdiConfig::default();
        let s = series(
            &(0..15)
                .map(|i| if i < 10 { 45.8 } else { 45.45 })
                .collect::<Vec<_>>(),
        );
        assert_eq!(scan(&s, &cfg), Scan::Awaiting { onset: 10 });
        assert_eq!(scan(&s[..5], &cfg), Scan::Pending);
    }
}
