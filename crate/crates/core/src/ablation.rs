//! Route ablation: no routing, suppressor only, delegator only, and both,
//! each trained over several seeds.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::routing::RouteSwitch;
use crate::trainer::{eval_dataset, train_dataset, train_until, MetricRecord, TrainState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arm {
    #[serde(rename = "none")]
    Baseline,
    #[serde(rename = "S")]
    Suppressor,
    #[serde(rename = "D")]
    Delegator,
    #[serde(rename = "S+D")]
    Both,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Baseline, Arm::Suppressor, Arm::Delegator, Arm::Both];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "none",
            Arm::Suppressor => "S",
            Arm::Delegator => "D",
            Arm::Both => "S+D",
        }
    }

    pub fn apply(self, cfg: &mut RunConfig) {
        let m = &mut cfg.model;
        m.routing_enabled = self != Arm::Baseline;
        m.switch = RouteSwitch {
            suppressor: matches!(self, Arm::Suppressor | Arm::Both),
            delegator: matches!(self, Arm::Delegator | Arm::Both),
        };
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown arm {s:?}; expected none, S, D or S+D")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub arm: Arm,
    pub seed: u64,
    /// Final main-branch metrics.
    pub ap: f64,
    pub ap50: f64,
    pub duplicate_rate: f64,
    /// Aux-branch duplicate rate at the record closest to half the steps.
    pub mid_step: u64,
    pub aux_duplicate_rate_mid: f64,
    pub history: Vec<MetricRecord>,
}

/// Trains one arm at one seed; the seed drives initialization, batch order and
/// the training scenes, while the held-out scenes are shared by every run.
pub fn run_arm(
    base: &RunConfig,
    arm: Arm,
    seed: u64,
    pool: Option<&rayon::ThreadPool>,
) -> Result<RunResult> {
    let mut cfg = base.clone();
    arm.apply(&mut cfg);
    cfg.set("seed", &seed.to_string())?;
    let data = train_dataset::<f32>(&cfg)?;
    let eval = eval_dataset::<f32>(&cfg)?;
    let mut state = TrainState::<f32>::new(cfg)?;
    train_until(&mut state, &data, &eval, u64::MAX, pool, |_| Ok(()))?;
    let last = state
        .history
        .last()
        .ok_or_else(|| Error::Contract("training produced no metric records".into()))?;
    let half = state.config.train.steps / 2;
    let mid = state
        .history
        .iter()
        .min_by_key(|r| r.step.abs_diff(half))
        .expect("history is non-empty");
    Ok(RunResult {
        arm,
        seed,
        ap: last.ap,
        ap50: last.ap50,
        duplicate_rate: last.duplicate_rate,
        mid_step: mid.step,
        aux_duplicate_rate_mid: mid.aux_duplicate_rate,
        history: state.history.clone(),
    })
}

/// Sample mean and standard deviation (n − 1 denominator; 0 for one sample).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: Arm,
    pub runs: usize,
    pub ap_mean: f64,
    pub ap_std: f64,
    pub duplicate_rate_mean: f64,
    pub duplicate_rate_std: f64,
    pub aux_duplicate_rate_mid_mean: f64,
    pub aux_duplicate_rate_mid_std: f64,
}

pub fn summarize(results: &[RunResult]) -> Vec<ArmSummary> {
    Arm::ALL
        .iter()
        .filter_map(|&arm| {
            let rs: Vec<&RunResult> = results.iter().filter(|r| r.arm == arm).collect();
            if rs.is_empty() {
                return None;
            }
            let col =
                |f: fn(&RunResult) -> f64| mean_std(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            let (ap_mean, ap_std) = col(|r| r.ap);
            let (dm, ds) = col(|r| r.duplicate_rate);
            let (am, asd) = col(|r| r.aux_duplicate_rate_mid);
            Some(ArmSummary {
                arm,
                runs: rs.len(),
                ap_mean,
                ap_std,
                duplicate_rate_mean: dm,
                duplicate_rate_std: ds,
                aux_duplicate_rate_mid_mean: am,
                aux_duplicate_rate_mid_std: asd,
            })
        })
        .collect()
}

/// Sign pattern of the route ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub delegator_not_below_baseline: bool,
    pub suppressor_above_baseline: bool,
    pub both_above_baseline: bool,
    pub both_fewer_duplicates_mid: bool,
    pub holds: bool,
}

pub fn verdict(summary: &[ArmSummary]) -> Result<Verdict> {
    let get = |arm: Arm| {
        summary
            .iter()
            .find(|s| s.arm == arm)
            .ok_or_else(|| Error::Contract(format!("no runs for arm {}", arm.name())))
    };
    let (base, s, d, sd) = (
        get(Arm::Baseline)?,
        get(Arm::Suppressor)?,
        get(Arm::Delegator)?,
        get(Arm::Both)?,
    );
    let v = Verdict {
        delegator_not_below_baseline: d.ap_mean >= base.ap_mean,
        suppressor_above_baseline: s.ap_mean > base.ap_mean,
        both_above_baseline: sd.ap_mean > base.ap_mean,
        both_fewer_duplicates_mid: sd.aux_duplicate_rate_mid_mean
            < base.aux_duplicate_rate_mid_mean,
        holds: false,
    };
    Ok(Verdict {
        holds: v.delegator_not_below_baseline
            && v.suppressor_above_baseline
            && v.both_above_baseline
            && v.both_fewer_duplicates_mid,
        ..v
    })
}

impl Verdict {
    pub fn line(&self) -> String {
        let mark = |b: bool| if b { "yes" } else { "no" };
        format!(
            "verdict: {} (D >= none: {}, S > none: {}, S+D > none: {}, S+D fewer mid-training aux duplicates: {})",
            if self.holds { "directional pattern holds" } else { "directional pattern not observed" },
            mark(self.delegator_not_below_baseline),
            mark(self.suppressor_above_baseline),
            mark(self.both_above_baseline),
            mark(self.both_fewer_duplicates_mid),
        )
    }
}

pub fn runs_csv(results: &[RunResult]) -> String {
    let mut out = String::from("arm,seed,ap,ap50,duplicate_rate,mid_step,aux_duplicate_rate_mid\n");
    for r in results {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.arm.name(),
            r.seed,
            r.ap,
            r.ap50,
            r.duplicate_rate,
            r.mid_step,
            r.aux_duplicate_rate_mid
        );
    }
    out
}

pub fn summary_csv(summary: &[ArmSummary]) -> String {
    let mut out = String::from("arm,runs,ap_mean,ap_std,duplicate_rate_mean,duplicate_rate_std,aux_duplicate_rate_mid_mean,aux_duplicate_rate_mid_std\n");
    for s in summary {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            s.arm.name(),
            s.runs,
            s.ap_mean,
            s.ap_std,
            s.duplicate_rate_mean,
            s.duplicate_rate_std,
            s.aux_duplicate_rate_mid_mean,
            s.aux_duplicate_rate_mid_std
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arm_switches() {
        let mut cfg = RunConfig::default();
        Arm::Baseline.apply(&mut cfg);
        assert!(!cfg.model.routing_enabled);
        Arm::Delegator.apply(&mut cfg);
        assert!(
            cfg.model.routing_enabled && !cfg.model.switch.suppressor && cfg.model.switch.delegator
        );
        assert_eq!("S+D".parse::<Arm>().unwrap(), Arm::Both);
        assert!("SD".parse::<Arm>().is_err());
    }

    #[test]
    fn sample_statistics() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn verdict_needs_strict_duplicate_drop() {
        let arm = |arm, ap, dup| ArmSummary {
            arm,
            runs: 3,
            ap_mean: ap,
            ap_std: 0.0,
            duplicate_rate_mean: 0.0,
            duplicate_rate_std: 0.0,
            aux_duplicate_rate_mid_mean: dup,
            aux_duplicate_rate_mid_std: 0.0,
        };
        let mut s = vec![
            arm(Arm::Baseline, 0.1, 0.2),
            arm(Arm::Suppressor, 0.2, 0.1),
            arm(Arm::Delegator, 0.1, 0.1),
            arm(Arm::Both, 0.3, 0.1),
        ];
        assert!(verdict(&s).unwrap().holds);
        s[3].aux_duplicate_rate_mid_mean = 0.2;
        let v = verdict(&s).unwrap();
        assert!(!v.holds && !v.both_fewer_duplicates_mid);
    }
}
