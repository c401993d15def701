//! Defective B-scan detection with local adaptive thresholds.
//!
//! Every B-scan is reduced to its summed flow signal `s_i`. A scan is a
//! low defect (blink, blank scan) when `s_i < mean_l - tau_l * spread_l` and a
//! high defect (motion, outlier) when `s_i > mean_u + tau_u * spread_u`, where
//! the statistics are taken over the `window` scans nearest to `i`, itself
//! included.

use serde::{Deserialize, Serialize};

use crate::volume::Volume;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DetectError {
    #[error("window of {window} scans exceeds sequence length {len}")]
    WindowTooLarge { window: usize, len: usize },
    #[error("invalid detector config: {0}")]
    InvalidConfig(String),
    #[error("scan index {index} out of range for {len} scans")]
    IndexOutOfRange { index: usize, len: usize },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpreadMode {
    /// Population standard deviation.
    #[default]
    StdDev,
    /// Population variance.
    Variance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub tau_l: f64,
    pub tau_u: f64,
    pub window_l: usize,
    pub window_u: usize,
    pub spread_mode: SpreadMode,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            tau_l: 0.029,
            tau_u: 0.0255,
            window_l: 16,
            window_u: 5,
            spread_mode: SpreadMode::StdDev,
        }
    }
}

/// Coefficients calibrated on the synthetic phantom corpus (see
/// `examples/calibrate_detector.rs`). In `StdDev` mode the rule is a local
/// z-score test, so these transfer to any intensity scale.
pub const PHANTOM_TAU_L: f64 = 1.55;
pub const PHANTOM_TAU_U: f64 = 1.95;

impl DetectorConfig {
    /// Default windows and spread mode with the phantom-calibrated coefficients.
    pub fn phantom_calibrated() -> Self {
        DetectorConfig {
            tau_l: PHANTOM_TAU_L,
            tau_u: PHANTOM_TAU_U,
            ..Default::default()
        }
    }

    pub fn validate(&self, n_scans: usize) -> Result<(), DetectError> {
        if !(self.tau_l > 0.0 && self.tau_u > 0.0) {
            return Err(DetectError::InvalidConfig(format!(
                "tau_l and tau_u must be positive (got {}, {})",
                self.tau_l, self.tau_u
            )));
        }
        if self.window_l < 2 || self.window_u < 2 {
            return Err(DetectError::InvalidConfig(format!(
                "windows must be >= 2 (got {}, {})",
                self.window_l, self.window_u
            )));
        }
        for window in [self.window_l, self.window_u] {
            if window > n_scans {
                return Err(DetectError::WindowTooLarge {
                    window,
                    len: n_scans,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Intact,
    LowDefect,
    HighDefect,
}

impl Label {
    pub fn is_defect(self) -> bool {
        self != Label::Intact
    }
}

/// Classification of one B-scan together with the values that decided it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanLabel {
    pub index: usize,
    pub label: Label,
    pub s: f64,
    pub theta_l: f64,
    pub theta_u: f64,
}

/// Sum of all pixel values of each B-scan.
pub fn flow_sums(v: &Volume) -> Vec<f64> {
    v.bscans()
        .map(|scan| scan.iter().map(|&x| x as f64).sum())
        .collect()
}

/// Start of the `x`-element window nearest to `i`: symmetric where possible
/// (one extra element after `i` for even `x`), shifted inward at the ends.
pub fn window_start(len: usize, i: usize, x: usize) -> usize {
    let before = (x - 1) / 2;
    i.saturating_sub(before).min(len - x)
}

/// Mean and spread over the `x` samples nearest to `i`.
pub fn local_stats(
    s: &[f64],
    i: usize,
    x: usize,
    mode: SpreadMode,
) -> Result<(f64, f64), DetectError> {
    if x > s.len() || x == 0 {
        return Err(DetectError::WindowTooLarge {
            window: x,
            len: s.len(),
        });
    }
    if i >= s.len() {
        return Err(DetectError::IndexOutOfRange {
            index: i,
            len: s.len(),
        });
    }
    let start = window_start(s.len(), i, x);
    let window = &s[start..start + x];
    let n = x as f64;
    let mean = window.iter().sum::<f64>() / n;
    let var = window.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let spread = match mode {
        SpreadMode::StdDev => var.sqrt(),
        SpreadMode::Variance => var,
    };
    Ok((mean, spread))
}

/// Labels a sequence of flow sums.
pub fn classify_sums(s: &[f64], cfg: &DetectorConfig) -> Result<Vec<ScanLabel>, DetectError> {
    cfg.validate(s.len())?;
    (0..s.len())
        .map(|i| {
            let (mean_l, spread_l) = local_stats(s, i, cfg.window_l, cfg.spread_mode)?;
            let (mean_u, spread_u) = local_stats(s, i, cfg.window_u, cfg.spread_mode)?;
            let theta_l = mean_l - cfg.tau_l * spread_l;
            let theta_u = mean_u + cfg.tau_u * spread_u;
            let label = if s[i] < theta_l {
                Label::LowDefect
            } else if s[i] > theta_u {
                Label::HighDefect
            } else {
                Label::Intact
            };
            Ok(ScanLabel {
                index: i,
                label,
                s: s[i],
                theta_l,
                theta_u,
            })
        })
        .collect()
}

pub fn detect_defects(v: &Volume, cfg: &DetectorConfig) -> Result<Vec<ScanLabel>, DetectError> {
    classify_sums(&flow_sums(v), cfg)
}

/// Confusion counts of predicted defects against a ground-truth mask.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DetectionScore {
    pub true_pos: usize,
    pub false_pos: usize,
    pub false_neg: usize,
}

impl DetectionScore {
    pub fn from_labels(labels: &[ScanLabel], truth: &[bool]) -> Self {
        let mut score = DetectionScore::default();
        for (l, &t) in labels.iter().zip(truth) {
            match (l.label.is_defect(), t) {
                (true, true) => score.true_pos += 1,
                (true, false) => score.false_pos += 1,
                (false, true) => score.false_neg += 1,
                (false, false) => {}
            }
        }
        score
    }

    pub fn merge(self, other: Self) -> Self {
        DetectionScore {
            true_pos: self.true_pos + other.true_pos,
            false_pos: self.false_pos + other.false_pos,
            false_neg: self.false_neg + other.false_neg,
        }
    }

    pub fn recall(&self) -> f64 {
        let d = self.true_pos + self.false_neg;
        if d == 0 {
            1.0
        } else {
            self.true_pos as f64 / d as f64
        }
    }

    pub fn precision(&self) -> f64 {
        let d = self.true_pos + self.false_pos;
        if d == 0 {
            1.0
        } else {
            self.true_pos as f64 / d as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

/// Grid search over `(tau_l, tau_u)` maximizing F1 on labeled flow-sum
/// sequences. Each sample is `(sums, truth)` with `truth[i]` marking a real
/// defect. Windows and spread mode are taken from `base`.
pub fn calibrate_taus(
    samples: &[(Vec<f64>, Vec<bool>)],
    base: &DetectorConfig,
    tau_l_grid: &[f64],
    tau_u_grid: &[f64],
) -> Result<(DetectorConfig, DetectionScore), DetectError> {
    let mut best: Option<(DetectorConfig, DetectionScore)> = None;
    for &tau_l in tau_l_grid {
        for &tau_u in tau_u_grid {
            let cfg = DetectorConfig {
                tau_l,
                tau_u,
                ..*base
            };
            let mut score = DetectionScore::default();
            for (sums, truth) in samples {
                let labels = classify_sums(sums, &cfg)?;
                score = score.merge(DetectionScore::from_labels(&labels, truth));
            }
            if best.as_ref().is_none_or(|(_, b)| score.f1() > b.f1()) {
                best = Some((cfg, score));
            }
        }
    }
    best.ok_or_else(|| DetectError::InvalidConfig("empty calibration grid".into()))
}
