//! Single benchmark runs and the sweep harness over mask size, label budget
//! and loss composition.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{load_dataset, RunConfig};
use crate::error::{Error, Result};
use crate::model::{EpsSeg, ObjectiveConfig};
use crate::trainer::{fit, validate, FitOutput, FitResult};
use crate::inference::EvalReport;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunOutcome {
    pub seed: u64,
    pub mean_dice: f64,
    pub report: EvalReport,
    pub labels: usize,
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

/// Trains on the configured data with `config.train.seed` and scores the
/// test images. With an output directory the log, checkpoints and an
/// `eval.json` land there.
pub fn run_once(config: &RunConfig, output: &FitOutput) -> Result<(RunOutcome, FitResult)> {
    config.validate()?;
    let seed = config.train.seed;
    let data = load_dataset(config, seed)?;
    if data.test.is_empty() {
        return Err(Error::Config("a benchmark run needs test images".into()));
    }
    let model = EpsSeg::new(&config.model)?;
    let start = Instant::now();
    let fitted = fit(&model, &config.train, &data.train, &data.labels, &[], output)?;
    let train_seconds = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let report = validate(&model, &fitted.state.params, &data.test, &config.inference)?;
    let outcome = RunOutcome {
        seed,
        mean_dice: report.mean_dice,
        report,
        labels: data.labels.len(),
        train_seconds,
        eval_seconds: start.elapsed().as_secs_f64(),
    };
    if let Some(dir) = &output.dir {
        let path = dir.join("eval.json");
        std::fs::write(&path, serde_json::to_string_pretty(&outcome)?).map_err(Error::io(&path))?;
    }
    Ok((outcome, fitted))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    MaskSize,
    LabelBudget,
    LossTerms,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::MaskSize => "mask_size",
            AblationAxis::LabelBudget => "label_budget",
            AblationAxis::LossTerms => "loss_terms",
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [AblationAxis::MaskSize, AblationAxis::LabelBudget, AblationAxis::LossTerms]
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation axis {s:?}; expected mask_size, label_budget or loss_terms")))
    }
}

pub const MASK_SIDES: [usize; 4] = [1, 3, 5, 9];
pub const LABEL_BUDGETS: [f64; 4] = [0.0005, 0.0001, 0.00005, 0.000025];

#[derive(Clone, Debug)]
pub struct AblationSetting {
    pub name: String,
    pub config: RunConfig,
}

/// The loss-composition rows, from the plain hierarchical VAE with a
/// classifier on detached features up to the full objective.
pub fn loss_term_settings(base: &RunConfig) -> Vec<AblationSetting> {
    let row = |name: &str, gmm_prior: bool, contrastive: bool, ce_through_encoder: bool| {
        let mut config = base.clone();
        config.train.objective = ObjectiveConfig { gmm_prior, ce_through_encoder, ..base.train.objective };
        if !contrastive {
            config.train.weights.alpha3 = 0.0;
        }
        AblationSetting { name: name.into(), config }
    };
    vec![
        row("vanilla", false, false, false),
        row("+GMM", true, false, false),
        row("+CL", true, true, false),
        row("+CE(full)", true, true, true),
    ]
}

pub fn ablation_settings(axis: AblationAxis, base: &RunConfig) -> Vec<AblationSetting> {
    match axis {
        AblationAxis::MaskSize => MASK_SIDES
            .iter()
            .map(|&side| {
                let mut config = base.clone();
                config.train.mask.side = side;
                AblationSetting { name: side.to_string(), config }
            })
            .collect(),
        AblationAxis::LabelBudget => LABEL_BUDGETS
            .iter()
            .map(|&fraction| {
                let mut config = base.clone();
                config.data.label_fraction = fraction;
                config.data.labels = None;
                AblationSetting { name: format!("{}%", fraction * 100.0), config }
            })
            .collect(),
        AblationAxis::LossTerms => loss_term_settings(base),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: AblationAxis,
    pub setting: String,
    pub seeds: Vec<u64>,
    pub dice: Vec<f64>,
    pub mean_dice: f64,
}

pub const ABLATION_HEADER: &str = "axis,setting,mean_dice,seeds,dice_per_seed";

impl AblationRow {
    pub fn csv_line(&self) -> String {
        let join = |v: Vec<String>| v.join(" ");
        format!(
            "{},{},{},{},{}",
            self.axis,
            self.setting,
            self.mean_dice,
            join(self.seeds.iter().map(u64::to_string).collect()),
            join(self.dice.iter().map(f64::to_string).collect())
        )
    }
}

/// Runs every setting of `axis` for each seed, serially. Per-run artefacts go
/// to `out_dir/<setting>/seed_<s>/` when a directory is given.
pub fn run_ablation(axis: AblationAxis, base: &RunConfig, seeds: &[u64], out_dir: Option<&Path>) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::Config("an ablation needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for setting in ablation_settings(axis, base) {
        let mut dice = Vec::new();
        for &seed in seeds {
            let mut config = setting.config.clone();
            config.train.seed = seed;
            let dir: Option<PathBuf> = out_dir.map(|d| d.join(sanitize(&setting.name)).join(format!("seed_{seed}")));
            let (outcome, _) = run_once(&config, &FitOutput { dir })?;
            log::info!("{axis} {} seed {seed}: mean Dice {:.4}", setting.name, outcome.mean_dice);
            dice.push(outcome.mean_dice);
        }
        let mean_dice = dice.iter().sum::<f64>() / dice.len() as f64;
        rows.push(AblationRow { axis, setting: setting.name, seeds: seeds.to_vec(), dice, mean_dice });
    }
    Ok(rows)
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' }).collect()
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut text = format!("{ABLATION_HEADER}\n");
    for r in rows {
        text.push_str(&r.csv_line());
        text.push('\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    std::fs::write(path, text).map_err(Error::io(path))
}
