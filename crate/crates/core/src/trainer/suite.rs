use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::run::{read_metrics, TrainOutcome, METRICS_HEADER};
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::objectives::ObjectiveKind;

/// An objective plus its input-noise ratio; written `ar`, `mdm` or
/// `ar+input_noise@0.1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Paradigm {
    pub objective: ObjectiveKind,
    pub mask_ratio: f64,
}

impl FromStr for Paradigm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (obj, ratio) = match s.split_once('@') {
            Some((o, r)) => (o, r.parse().map_err(|_| Error::Config(format!("bad mask ratio in {s:?}")))?),
            None => (s, 0.0),
        };
        Ok(Paradigm {
            objective: obj.parse()?,
            mask_ratio: ratio,
        })
    }
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.objective {
            ObjectiveKind::ArInputNoise => write!(f, "ar-noise{}", self.mask_ratio),
            o => write!(f, "{o}"),
        }
    }
}

pub const AGGREGATE_HEADER: &str = "run,unique_tokens,objective,mask_ratio";

#[derive(Debug)]
pub struct SuiteOutcome {
    pub dir: PathBuf,
    pub aggregate: PathBuf,
    /// Member name and the error message of runs that failed.
    pub failures: Vec<(String, String)>,
    pub members: Vec<(String, TrainConfig)>,
}

/// One run per `(budget, paradigm)` under `root/<base.name>/`, all sharing
/// the base seed; `runner` executes a single member. Failures are recorded
/// and the suite continues. Writes `aggregate.csv` joining every member's
/// metrics.
pub fn run_crossover_suite(
    base: &TrainConfig,
    unique_budgets: &[usize],
    paradigms: &[Paradigm],
    root: &Path,
    runner: &dyn Fn(&TrainConfig, &Path) -> Result<TrainOutcome>,
) -> Result<SuiteOutcome> {
    if unique_budgets.is_empty() || paradigms.is_empty() {
        return Err(Error::Config("suite needs at least one budget and one paradigm".into()));
    }
    if let Some(u) = unique_budgets.iter().find(|&&u| u > base.total_tokens) {
        return Err(Error::Config(format!("budget {u} exceeds total_tokens {}", base.total_tokens)));
    }
    let dir = root.join(&base.name);
    fs::create_dir_all(&dir)?;
    let mut failures = Vec::new();
    let mut members = Vec::new();
    for &u in unique_budgets {
        for p in paradigms {
            let mut cfg = base.clone();
            cfg.unique_tokens = u;
            cfg.objective = p.objective;
            cfg.mask_ratio = p.mask_ratio;
            cfg.name = format!("u{u}-{p}");
            let member_dir = dir.join(&cfg.name);
            if let Err(e) = runner(&cfg, &member_dir) {
                log::error!("suite member {} failed: {e}", cfg.name);
                failures.push((cfg.name.clone(), e.to_string()));
            }
            members.push((cfg.name.clone(), cfg));
        }
    }
    let mut agg = format!("{AGGREGATE_HEADER},{METRICS_HEADER}\n");
    for (name, cfg) in &members {
        let Ok(rows) = read_metrics(&dir.join(name).join("metrics.csv")) else {
            continue;
        };
        for r in rows {
            agg.push_str(&format!("{name},{},{},{},{}\n", cfg.unique_tokens, cfg.objective, cfg.mask_ratio, r.to_csv_row()));
        }
    }
    let aggregate = dir.join("aggregate.csv");
    fs::write(&aggregate, agg)?;
    if !failures.is_empty() {
        let text: String = failures.iter().map(|(n, e)| format!("{n}: {e}\n")).collect();
        fs::write(dir.join("failures.txt"), text)?;
    }
    Ok(SuiteOutcome {
        dir,
        aggregate,
        failures,
        members,
    })
}
