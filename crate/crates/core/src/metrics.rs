//! Background-aware classification metrics and the K-shot ablation sweep.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedder::EmbeddingModel;
use crate::error::{Error, Result};
use crate::gesture::{
    argmax, kshot_sample, label_map_for, train, GestureHeadConfig, GestureModel, LabeledFrame, Regime, TrainSpec,
};
use crate::landmark::FrameLandmarks;

/// Rows are true classes, columns predictions; index 0 is background.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

/// A rate together with whether its denominator was empty (value then 1.0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub value: f64,
    pub undefined: bool,
}

fn rate(num: u64, den: u64) -> Rate {
    if den == 0 {
        Rate {
            value: 1.0,
            undefined: true,
        }
    } else {
        Rate {
            value: num as f64 / den as f64,
            undefined: false,
        }
    }
}

impl ConfusionMatrix {
    pub fn new(labels: Vec<String>) -> Self {
        let n = labels.len();
        ConfusionMatrix {
            labels,
            counts: vec![vec![0; n]; n],
        }
    }

    pub fn from_pairs(labels: Vec<String>, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut cm = ConfusionMatrix::new(labels);
        for (truth, pred) in pairs {
            cm.record(truth, pred)?;
        }
        Ok(cm)
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn record(&mut self, truth: usize, pred: usize) -> Result<()> {
        let n = self.num_classes();
        if truth >= n || pred >= n {
            return Err(Error::LabelMismatch(format!(
                "class index ({truth}, {pred}) outside {n} classes"
            )));
        }
        self.counts[truth][pred] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Background predicted background.
    pub fn true_negatives(&self) -> u64 {
        self.counts.first().map_or(0, |r| r[0])
    }

    /// Background predicted as any gesture.
    pub fn false_positives(&self) -> u64 {
        self.counts.first().map_or(0, |r| r[1..].iter().sum())
    }

    /// Gesture samples predicted as their own class.
    pub fn true_positives(&self) -> u64 {
        (1..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    /// Gesture samples predicted as background or another gesture.
    pub fn false_negatives(&self) -> u64 {
        (1..self.num_classes())
            .map(|i| self.counts[i].iter().sum::<u64>() - self.counts[i][i])
            .sum()
    }

    pub fn specificity(&self) -> Rate {
        rate(self.true_negatives(), self.true_negatives() + self.false_positives())
    }

    /// Pooled over all gesture classes.
    pub fn sensitivity(&self) -> Rate {
        rate(self.true_positives(), self.true_positives() + self.false_negatives())
    }
}

pub fn specificity(cm: &ConfusionMatrix) -> f64 {
    cm.specificity().value
}

pub fn sensitivity(cm: &ConfusionMatrix) -> f64 {
    cm.sensitivity().value
}

/// Harmonic mean of sensitivity and specificity (0 when both are 0).
pub fn ss_f1(sensitivity: f64, specificity: f64) -> f64 {
    let sum = sensitivity + specificity;
    if sum == 0.0 {
        0.0
    } else {
        2.0 * sensitivity * specificity / sum
    }
}

pub fn complementary_ss_f1(sensitivity: f64, specificity: f64) -> f64 {
    1.0 - ss_f1(sensitivity, specificity)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub sensitivity: f64,
    pub specificity: f64,
    pub ss_f1: f64,
    pub complementary_ss_f1: f64,
    /// Set when a rate had an empty denominator and was reported as 1.0.
    pub sensitivity_undefined: bool,
    pub specificity_undefined: bool,
    pub regime: Option<Regime>,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    pub seed: Option<u64>,
}

impl EvalReport {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Self {
        let sens = confusion.sensitivity();
        let spec = confusion.specificity();
        let f1 = ss_f1(sens.value, spec.value);
        EvalReport {
            confusion,
            sensitivity: sens.value,
            specificity: spec.value,
            ss_f1: f1,
            complementary_ss_f1: 1.0 - f1,
            sensitivity_undefined: sens.undefined,
            specificity_undefined: spec.undefined,
            regime: None,
            k: None,
            seed: None,
        }
    }
}

/// Confusion matrix of argmax predictions against labels.
pub fn confusion_for(model: &GestureModel, split: &[LabeledFrame]) -> Result<ConfusionMatrix> {
    let truths = split
        .iter()
        .map(|(_, l)| {
            model
                .class_index(l)
                .ok_or_else(|| Error::LabelMismatch(format!("label {l:?} unknown to the model")))
        })
        .collect::<Result<Vec<_>>>()?;
    let frames: Vec<FrameLandmarks> = split.iter().map(|(f, _)| f.clone()).collect();
    let probs = model.probabilities_batch(&frames)?;
    ConfusionMatrix::from_pairs(
        model.label_map.clone(),
        truths.into_iter().enumerate().map(|(r, t)| (t, argmax(probs.row(r)))),
    )
}

pub fn evaluate(model: &GestureModel, split: &[LabeledFrame]) -> Result<EvalReport> {
    if split.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation split".into()));
    }
    let mut report = EvalReport::from_confusion(confusion_for(model, split)?);
    if let Some(meta) = &model.meta {
        report.regime = Some(meta.spec.regime);
        report.k = Some(meta.spec.k);
        report.seed = Some(meta.spec.seed);
    }
    Ok(report)
}

/// Knobs shared by every cell of an ablation sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub ks: Vec<usize>,
    pub regimes: Vec<Regime>,
    pub seeds: Vec<u64>,
    pub head_hidden: Vec<usize>,
    pub dropout_rate: f64,
    pub lr_head: f64,
    pub lr_embedder: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

pub const DEFAULT_KS: [usize; 6] = [10, 20, 50, 100, 200, 500];

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            ks: DEFAULT_KS.to_vec(),
            regimes: Regime::ALL.to_vec(),
            seeds: vec![1, 2, 3, 4, 5],
            head_hidden: vec![64],
            dropout_rate: 0.2,
            lr_head: 1e-3,
            lr_embedder: 1e-4,
            batch_size: 32,
            epochs: 50,
        }
    }
}

impl AblationConfig {
    pub fn train_spec(&self, regime: Regime, k: usize, seed: u64) -> TrainSpec {
        TrainSpec {
            regime,
            k,
            lr_head: self.lr_head,
            lr_embedder: if regime == Regime::Frozen {
                0.0
            } else {
                self.lr_embedder
            },
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    #[serde(rename = "K")]
    pub k: usize,
    pub regime: Regime,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    #[serde(rename = "K")]
    pub k: usize,
    pub regime: Regime,
    pub mean_comp_ssf1: f64,
    /// Sample standard deviation over seeds (0 for a single seed).
    pub stddev: f64,
    pub n_seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub reports: Vec<EvalReport>,
    pub failures: Vec<CellFailure>,
    pub summary: Vec<SummaryRow>,
}

impl AblationResult {
    pub fn mean(&self, k: usize, regime: Regime) -> Option<f64> {
        self.summary
            .iter()
            .find(|r| r.k == k && r.regime == regime)
            .map(|r| r.mean_comp_ssf1)
    }
}

/// Trains and evaluates one model per (K, regime, seed) cell. Cells run in
/// parallel; results are returned in (K, regime, seed) iteration order.
pub fn run_ablation(
    dataset: &[LabeledFrame],
    embedder: &EmbeddingModel,
    cfg: &AblationConfig,
) -> Result<AblationResult> {
    let num_gestures = label_map_for(dataset).len() - 1;
    let head = GestureHeadConfig {
        hidden_dims: cfg.head_hidden.clone(),
        dropout_rate: cfg.dropout_rate,
        num_gestures,
    };
    head.validate()?;
    let cells: Vec<(usize, Regime, u64)> = cfg
        .ks
        .iter()
        .flat_map(|&k| {
            cfg.regimes
                .iter()
                .flat_map(move |&r| cfg.seeds.iter().map(move |&s| (k, r, s)))
        })
        .collect();
    let outcomes: Vec<std::result::Result<EvalReport, CellFailure>> = cells
        .par_iter()
        .map(|&(k, regime, seed)| {
            run_cell(dataset, embedder, &head, &cfg.train_spec(regime, k, seed)).map_err(|e| CellFailure {
                k,
                regime,
                seed,
                error: e.to_string(),
            })
        })
        .collect();
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => reports.push(r),
            Err(f) => failures.push(f),
        }
    }
    let summary = summarize(&reports);
    Ok(AblationResult {
        reports,
        failures,
        summary,
    })
}

fn run_cell(
    dataset: &[LabeledFrame],
    embedder: &EmbeddingModel,
    head: &GestureHeadConfig,
    spec: &TrainSpec,
) -> Result<EvalReport> {
    let (train_split, eval_split) = kshot_sample(dataset, spec.k, spec.seed)?;
    let model = train(embedder, &train_split, head, spec)?;
    evaluate(&model, &eval_split)
}

/// Mean and sample standard deviation of complementary SS F1 per (K, regime),
/// ordered by K then regime. Values are sorted before summation so the
/// result does not depend on seed order.
pub fn summarize(reports: &[EvalReport]) -> Vec<SummaryRow> {
    let mut groups: std::collections::BTreeMap<(usize, Regime), Vec<f64>> = std::collections::BTreeMap::new();
    for r in reports {
        if let (Some(k), Some(regime)) = (r.k, r.regime) {
            groups.entry((k, regime)).or_default().push(r.complementary_ss_f1);
        }
    }
    groups
        .into_iter()
        .map(|((k, regime), mut v)| {
            v.sort_by(f64::total_cmp);
            let n = v.len();
            let mean = v.iter().sum::<f64>() / n as f64;
            let stddev = if n > 1 {
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            SummaryRow {
                k,
                regime,
                mean_comp_ssf1: mean,
                stddev,
                n_seeds: n,
            }
        })
        .collect()
}

pub fn write_reports_jsonl(reports: &[EvalReport], mut out: impl Write) -> Result<()> {
    for r in reports {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_summary_csv(summary: &[SummaryRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "K,regime,mean_comp_ssf1,stddev,n_seeds")?;
    for r in summary {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.k, r.regime, r.mean_comp_ssf1, r.stddev, r.n_seeds
        )?;
    }
    Ok(())
}

/// Writes `reports.jsonl`, `summary.csv` and, when present, `failures.jsonl` into `dir`.
pub fn write_ablation_outputs(result: &AblationResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_reports_jsonl(
        &result.reports,
        std::io::BufWriter::new(std::fs::File::create(dir.join("reports.jsonl"))?),
    )?;
    write_summary_csv(
        &result.summary,
        std::io::BufWriter::new(std::fs::File::create(dir.join("summary.csv"))?),
    )?;
    if !result.failures.is_empty() {
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("failures.jsonl"))?);
        for fail in &result.failures {
            serde_json::to_writer(&mut f, fail).map_err(std::io::Error::from)?;
            f.write_all(b"\n")?;
        }
    }
    Ok(())
}
