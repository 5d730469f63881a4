//! End-to-end training, evaluation, persistence and scoring.
//!
//! A run loads or generates data, splits it by week, fits preprocessing on
//! the training weeks, trains the BNN, the constrained GBDT and its
//! unconstrained twin, picks the fusion weight after a drift test, fits the
//! temperature on validation weeks and evaluates every variant on the test
//! weeks. Artifacts are written only after every stage has succeeded.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::bnn::{BnnConfig, BnnModel};
use crate::calibration::{fit_temperature_in, TemperatureModel, T_MAX, T_MIN};
use crate::data::{self, Dataset, LoadOptions, SynthConfig, TimeSplit, DEFAULT_GROUP_COLUMN};
use crate::error::{Error, Result};
use crate::explain::{explain_row, Attribution};
use crate::gbdt::{GbdtData, GbdtModel, GbdtParams};
use crate::math::mean_std;
use crate::metrics::{
    fairness_gaps, metric_bundle, reliability_bins, stability_report, FairnessGaps, MetricBundle,
    MetricOptions, StabilityReport,
};
use crate::preprocess::{self, Design, PreprocessOptions, PreprocessorState};
use crate::shift::{drift_test, fuse, select_weight, DriftReport, FusionChoice, DEFAULT_TAU};
use crate::SCHEMA_VERSION;

pub const VARIANT_BNN: &str = "bnn";
pub const VARIANT_GBDT: &str = "gbdt";
pub const VARIANT_FAIR_GBDT: &str = "fair_gbdt";
pub const VARIANT_FUSED: &str = "fused";
pub const VARIANT_CALIBRATED: &str = "fused_calibrated";

/// Variants in report order.
pub const VARIANTS: [&str; 5] = [
    VARIANT_BNN,
    VARIANT_GBDT,
    VARIANT_FAIR_GBDT,
    VARIANT_FUSED,
    VARIANT_CALIBRATED,
];

const MODEL_DIR: &str = "models";
const DATA_DIR: &str = "data";
const PLOT_DIR: &str = "plots";

fn default_group_column() -> String {
    DEFAULT_GROUP_COLUMN.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synth {
        #[serde(default)]
        synth: SynthConfig,
    },
    Files {
        base: PathBuf,
        #[serde(default)]
        aux: Vec<PathBuf>,
        #[serde(default = "default_group_column")]
        group_column: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationBounds {
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for CalibrationBounds {
    fn default() -> Self {
        Self {
            t_min: T_MIN,
            t_max: T_MAX,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSource,
    pub split: TimeSplit,
    pub preprocess: PreprocessOptions,
    pub bnn: BnnConfig,
    pub gbdt: GbdtParams,
    /// Drift threshold on `d_shift`.
    pub tau: f64,
    pub calibration: CalibrationBounds,
    pub metrics: MetricOptions,
    /// Last early week for the stability split; defaults to the middle test week.
    pub stability_split_week: Option<u32>,
    pub explain_top_k: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Synth {
                synth: SynthConfig::default(),
            },
            split: TimeSplit {
                cut_week: 27,
                val_weeks: 6,
            },
            preprocess: PreprocessOptions::default(),
            bnn: BnnConfig::default(),
            gbdt: GbdtParams::default(),
            tau: DEFAULT_TAU,
            calibration: CalibrationBounds::default(),
            metrics: MetricOptions::default(),
            stability_split_week: None,
            explain_top_k: 20,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.bnn.validate()?;
        self.gbdt.validate()?;
        match &self.data {
            DataSource::Synth { synth } => synth.validate()?,
            DataSource::Files { base, aux, .. } => {
                for p in std::iter::once(base).chain(aux) {
                    if !p.exists() {
                        return Err(Error::Config(format!(
                            "data file {} does not exist",
                            p.display()
                        )));
                    }
                }
            }
        }
        if !(self.tau >= 0.0) {
            return Err(Error::Config("tau must be non-negative".into()));
        }
        let b = self.calibration;
        if !(b.t_min > 0.0 && b.t_min <= 1.0 && b.t_max >= 1.0 && b.t_max.is_finite()) {
            return Err(Error::Config(
                "calibration bounds must be positive and contain 1".into(),
            ));
        }
        let m = self.metrics;
        if !(0.0..=1.0).contains(&m.target_fpr)
            || !(0.0..=1.0).contains(&m.threshold)
            || m.ece_bins == 0
        {
            return Err(Error::Config(
                "metric options need target_fpr and threshold in [0, 1] and ece_bins > 0".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.gbdt.threshold) {
            return Err(Error::Config(
                "GBDT fairness threshold must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Derives an independent seed per stage from the run seed.
pub fn stage_seed(seed: u64, stage: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stage)
}

/// Fusion weight plus what the scoring path needs to redraw BNN samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionModel {
    pub schema_version: u32,
    pub beta: f64,
    pub bnn_predict_seed: u64,
    pub bnn_predict_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub preprocessor: PreprocessorState,
    pub bnn: BnnModel,
    pub gbdt: GbdtModel,
    pub gbdt_unconstrained: GbdtModel,
    pub fusion: FusionModel,
    pub temperature: TemperatureModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRow {
    pub case_id: i64,
    pub mu_bnn: f64,
    pub u_epi: f64,
    pub u_ale: f64,
    pub mu_gbdt: f64,
    pub fused: f64,
    pub calibrated: f64,
}

impl ModelBundle {
    pub fn score_design(&self, design: &Design) -> Result<Vec<ScoredRow>> {
        let mc = self.bnn.predict_mc(
            design.x.view(),
            self.fusion.bnn_predict_samples,
            self.fusion.bnn_predict_seed,
        )?;
        let gbdt = self.gbdt.predict_proba(design.x.view())?;
        let fused = fuse(&gbdt, &mc.mean, self.fusion.beta)?;
        let calibrated = self.temperature.apply(&fused);
        Ok((0..design.n_rows())
            .map(|i| ScoredRow {
                case_id: design.case_ids[i],
                mu_bnn: mc.mean[i],
                u_epi: mc.epistemic[i],
                u_ale: mc.aleatoric[i],
                mu_gbdt: gbdt[i],
                fused: fused[i],
                calibrated: calibrated[i],
            })
            .collect())
    }

    fn check_versions(&self) -> Result<()> {
        self.preprocessor.check_version()?;
        self.bnn.check_version()?;
        self.gbdt.check_version()?;
        self.gbdt_unconstrained.check_version()?;
        self.temperature.check_version()?;
        if self.fusion.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "fusion schema_version {} does not match supported version {SCHEMA_VERSION}",
                self.fusion.schema_version
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySummary {
    pub mean_epistemic: f64,
    pub mean_aleatoric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub schema_version: u32,
    pub seed: u64,
    pub config: RunConfig,
    pub partitions: PartitionSizes,
    /// Test-week metrics per variant.
    pub metrics: BTreeMap<String, MetricBundle>,
    pub fairness_test: BTreeMap<String, FairnessGaps>,
    pub fairness_val: BTreeMap<String, FairnessGaps>,
    pub stability: BTreeMap<String, StabilityReport>,
    pub drift: DriftReport,
    pub fusion: FusionChoice,
    pub temperature: TemperatureModel,
    pub uncertainty_test: UncertaintySummary,
    pub gbdt_group_weights: BTreeMap<String, f64>,
}

impl ScoreReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityRow {
    pub variant: String,
    pub bin_lower: f64,
    pub bin_upper: f64,
    pub count: usize,
    pub mean_score: f64,
    pub mean_label: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeekTrendRow {
    pub variant: String,
    pub week: u32,
    pub auc_pr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub variant: String,
    pub dp_gap: f64,
    pub eo_gap: f64,
    pub auc_pr: f64,
    pub auc_roc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub variant: String,
    pub auc_roc: f64,
    pub auc_pr: f64,
    pub recall_at_fpr: f64,
    pub brier: f64,
    pub ece: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PlotData {
    pub reliability: Vec<ReliabilityRow>,
    pub week_trend: Vec<WeekTrendRow>,
    pub fairness_tradeoff: Vec<TradeoffRow>,
    pub variant_auc_pr: Vec<VariantRow>,
}

/// Everything a run produces, held in memory until written.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: ScoreReport,
    pub models: ModelBundle,
    /// Scores for every row of the dataset, in dataset order.
    pub scores: Vec<ScoredRow>,
    pub explanations: Vec<Attribution>,
    pub plots: PlotData,
    pub dataset: Dataset,
    /// Whether the dataset came from the generator (and so is written out).
    pub synthetic: bool,
}

pub fn load_dataset(source: &DataSource, seed: u64) -> Result<Dataset> {
    match source {
        DataSource::Synth { synth } => data::synth_generate(synth, seed),
        DataSource::Files {
            base,
            aux,
            group_column,
        } => data::load_tables_with(
            base,
            aux,
            &LoadOptions {
                group_column: group_column.clone(),
                require_target: true,
            },
        ),
    }
}

fn pick<T: Copy>(values: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| values[i]).collect()
}

fn timed<T>(stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f().map_err(|e| e.in_stage(stage));
    log::info!("stage {stage} finished in {:.2?}", start.elapsed());
    out
}

/// Runs every stage for `cfg.seed`.
pub fn run(cfg: &RunConfig) -> Result<RunOutput> {
    timed("config", || cfg.validate())?;
    let seed = cfg.seed;
    let dataset = timed("load", || {
        let ds = load_dataset(&cfg.data, seed)?;
        ds.validate()?;
        if !ds.has_labels {
            return Err(Error::schema("base", "training data needs a target column"));
        }
        Ok(ds)
    })?;
    let parts = timed("split", || data::split_by_week(&dataset, cfg.split))?;
    let (pre, all) = timed("preprocess", || {
        let pre = preprocess::fit(&dataset.view(parts.train.clone()), &cfg.preprocess)?;
        let all = pre.transform(&dataset.all())?;
        Ok((pre, all))
    })?;
    let names = all.column_names.clone();
    let labels = dataset.all().labels();
    let groups = dataset.all().groups();
    let weeks = dataset.all().weeks();
    let rows_of = |idx: &[usize]| -> Array2<f64> { all.x.select(Axis(0), idx) };
    let (x_tr, x_va) = (rows_of(&parts.train), rows_of(&parts.val));
    let (y_tr, y_va, y_te) = (
        pick(&labels, &parts.train),
        pick(&labels, &parts.val),
        pick(&labels, &parts.test),
    );
    let g_of = |idx: &[usize]| -> Vec<String> { idx.iter().map(|&i| groups[i].clone()).collect() };
    let (g_tr, g_va, g_te) = (g_of(&parts.train), g_of(&parts.val), g_of(&parts.test));

    let bnn = timed("bnn", || {
        let bnn_cfg = BnnConfig {
            seed: stage_seed(seed, 1),
            ..cfg.bnn.clone()
        };
        let mut model = BnnModel::new(all.x.ncols(), &bnn_cfg)?;
        model.train(x_tr.view(), &y_tr, &bnn_cfg)?;
        Ok(model)
    })?;

    let (gbdt, gbdt_plain) = timed("gbdt", || {
        let train = GbdtData {
            x: x_tr.view(),
            y: &y_tr,
            groups: &g_tr,
        };
        let val = GbdtData {
            x: x_va.view(),
            y: &y_va,
            groups: &g_va,
        };
        let fair = GbdtModel::fit(&train, Some(&val), &cfg.gbdt)?;
        let plain = GbdtModel::fit(&train, None, &cfg.gbdt.unconstrained())?;
        Ok((fair, plain))
    })?;

    let predict_seed = stage_seed(seed, 2);
    let (drift, choice, mc, gbdt_all) = timed("fusion", || {
        let mc = bnn.predict_mc(all.x.view(), cfg.bnn.predict_samples, predict_seed)?;
        let gbdt_all = gbdt.predict_proba(all.x.view())?;
        let provisional = fuse(&gbdt_all, &mc.mean, 0.5)?;
        let drift = drift_test(
            x_tr.view(),
            &pick(&provisional, &parts.train),
            x_va.view(),
            &pick(&provisional, &parts.val),
            &names,
            cfg.tau,
        )?;
        let choice = select_weight(
            &pick(&gbdt_all, &parts.val),
            &pick(&mc.mean, &parts.val),
            &y_va,
            &pick(&weeks, &parts.val),
            &drift,
        )?;
        Ok((drift, choice, mc, gbdt_all))
    })?;

    let temperature = timed("calibration", || {
        let fused = fuse(&gbdt_all, &mc.mean, choice.beta)?;
        fit_temperature_in(
            &pick(&fused, &parts.val),
            &y_va,
            cfg.calibration.t_min,
            cfg.calibration.t_max,
        )
    })?;

    let models = ModelBundle {
        preprocessor: pre,
        bnn,
        gbdt,
        gbdt_unconstrained: gbdt_plain,
        fusion: FusionModel {
            schema_version: SCHEMA_VERSION,
            beta: choice.beta,
            bnn_predict_seed: predict_seed,
            bnn_predict_samples: cfg.bnn.predict_samples,
        },
        temperature,
    };
    let scores = timed("score", || models.score_design(&all))?;

    let (report, plots, explanations) = timed("evaluate", || {
        let plain_all = models.gbdt_unconstrained.predict_proba(all.x.view())?;
        let column = |f: fn(&ScoredRow) -> f64| -> Vec<f64> { scores.iter().map(f).collect() };
        let variant_scores: Vec<(&str, Vec<f64>)> = vec![
            (VARIANT_BNN, column(|r| r.mu_bnn)),
            (VARIANT_GBDT, plain_all),
            (VARIANT_FAIR_GBDT, column(|r| r.mu_gbdt)),
            (VARIANT_FUSED, column(|r| r.fused)),
            (VARIANT_CALIBRATED, column(|r| r.calibrated)),
        ];
        let test_weeks = pick(&weeks, &parts.test);
        let split_week = match cfg.stability_split_week {
            Some(w) => w,
            None => {
                let lo = *test_weeks.iter().min().expect("non-empty test");
                let hi = *test_weeks.iter().max().expect("non-empty test");
                lo + (hi - lo) / 2
            }
        };

        let mut metrics = BTreeMap::new();
        let mut fairness_test = BTreeMap::new();
        let mut fairness_val = BTreeMap::new();
        let mut stability = BTreeMap::new();
        let mut plots = PlotData::default();
        let delta = cfg.metrics.threshold;
        for (name, s) in &variant_scores {
            let s_te = pick(s, &parts.test);
            let bundle = metric_bundle(&s_te, &y_te, &cfg.metrics)?;
            let fair_te = fairness_gaps(&s_te, &y_te, &g_te, delta)?;
            let fair_va = fairness_gaps(&pick(s, &parts.val), &y_va, &g_va, delta)?;
            let stab = stability_report(&s_te, &y_te, &test_weeks, split_week)?;
            for b in reliability_bins(&s_te, &y_te, cfg.metrics.ece_bins)? {
                plots.reliability.push(ReliabilityRow {
                    variant: name.to_string(),
                    bin_lower: b.lower,
                    bin_upper: b.upper,
                    count: b.count,
                    mean_score: b.mean_score,
                    mean_label: b.mean_label,
                });
            }
            for &(week, auc_pr) in &stab.week_series {
                plots.week_trend.push(WeekTrendRow {
                    variant: name.to_string(),
                    week,
                    auc_pr,
                });
            }
            plots.fairness_tradeoff.push(TradeoffRow {
                variant: name.to_string(),
                dp_gap: fair_te.dp_gap,
                eo_gap: fair_te.eo_gap,
                auc_pr: bundle.auc_pr,
                auc_roc: bundle.auc_roc,
            });
            plots.variant_auc_pr.push(VariantRow {
                variant: name.to_string(),
                auc_roc: bundle.auc_roc,
                auc_pr: bundle.auc_pr,
                recall_at_fpr: bundle.recall_at_fpr,
                brier: bundle.brier,
                ece: bundle.ece,
            });
            metrics.insert(name.to_string(), bundle);
            fairness_test.insert(name.to_string(), fair_te);
            fairness_val.insert(name.to_string(), fair_va);
            stability.insert(name.to_string(), stab);
        }

        let test_rows: Vec<&ScoredRow> = parts.test.iter().map(|&i| &scores[i]).collect();
        let n_te = test_rows.len() as f64;
        let uncertainty_test = UncertaintySummary {
            mean_epistemic: test_rows.iter().map(|r| r.u_epi).sum::<f64>() / n_te,
            mean_aleatoric: test_rows.iter().map(|r| r.u_ale).sum::<f64>() / n_te,
        };

        let mut ranked = parts.test.clone();
        ranked.sort_by(|&a, &b| {
            scores[b]
                .calibrated
                .total_cmp(&scores[a].calibrated)
                .then(a.cmp(&b))
        });
        let explanations = ranked
            .iter()
            .take(cfg.explain_top_k)
            .map(|&i| {
                let x = all.x.row(i).to_vec();
                explain_row(&models.gbdt, &x, &names, Some(scores[i].case_id))
            })
            .collect::<Result<Vec<_>>>()?;

        let report = ScoreReport {
            schema_version: SCHEMA_VERSION,
            seed,
            config: cfg.clone(),
            partitions: PartitionSizes {
                train: parts.train.len(),
                val: parts.val.len(),
                test: parts.test.len(),
            },
            metrics,
            fairness_test,
            fairness_val,
            stability,
            drift,
            fusion: choice,
            temperature: models.temperature.clone(),
            uncertainty_test,
            gbdt_group_weights: models.gbdt.final_weights(),
        };
        Ok((report, plots, explanations))
    })?;

    let synthetic = matches!(cfg.data, DataSource::Synth { .. });
    Ok(RunOutput {
        report,
        models,
        scores,
        explanations,
        plots,
        dataset,
        synthetic,
    })
}

/// Tracks files written so a failed write can be rolled back.
struct ArtifactWriter {
    root: PathBuf,
    written: Vec<PathBuf>,
    created_dirs: Vec<PathBuf>,
}

impl ArtifactWriter {
    fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
            written: Vec::new(),
            created_dirs: Vec::new(),
        }
    }

    fn ensure_dir(&mut self, dir: &Path) -> Result<()> {
        let mut missing = Vec::new();
        let mut cur = Some(dir);
        while let Some(d) = cur {
            if d.as_os_str().is_empty() || d.exists() {
                break;
            }
            missing.push(d.to_path_buf());
            cur = d.parent();
        }
        fs::create_dir_all(dir)?;
        missing.reverse();
        self.created_dirs.extend(missing);
        Ok(())
    }

    fn path(&mut self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            self.ensure_dir(parent)?;
        }
        self.written.push(p.clone());
        Ok(p)
    }

    fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let p = self.path(rel)?;
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        fs::write(p, s)?;
        Ok(())
    }

    fn csv<T: Serialize>(&mut self, rel: &str, rows: &[T], header: &[&str]) -> Result<()> {
        let p = self.path(rel)?;
        write_csv(&p, rows, header)
    }

    fn rollback(&self) {
        for p in self.written.iter().rev() {
            let _ = fs::remove_file(p);
        }
        for d in self.created_dirs.iter().rev() {
            let _ = fs::remove_dir(d);
        }
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    write_csv_to(fs::File::create(path)?, rows, header)
}

fn write_csv_to<T: Serialize>(out: impl std::io::Write, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub const SCORE_HEADER: [&str; 7] = [
    "case_id",
    "mu_bnn",
    "u_epi",
    "u_ale",
    "mu_gbdt",
    "fused",
    "calibrated",
];

pub fn write_scores(path: &Path, rows: &[ScoredRow]) -> Result<()> {
    write_csv(path, rows, &SCORE_HEADER)
}

pub fn write_scores_to(out: impl std::io::Write, rows: &[ScoredRow]) -> Result<()> {
    write_csv_to(out, rows, &SCORE_HEADER)
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoredRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// Writes all run artifacts under `out`; on failure removes what was written.
pub fn write_run(out: &Path, output: &RunOutput) -> Result<Vec<PathBuf>> {
    let mut w = ArtifactWriter::new(out);
    let result = (|| -> Result<()> {
        w.ensure_dir(out)?;
        let m = &output.models;
        w.json(&format!("{MODEL_DIR}/preprocessor.json"), &m.preprocessor)?;
        w.json(&format!("{MODEL_DIR}/bnn.json"), &m.bnn)?;
        w.json(&format!("{MODEL_DIR}/gbdt.json"), &m.gbdt)?;
        w.json(
            &format!("{MODEL_DIR}/gbdt_unconstrained.json"),
            &m.gbdt_unconstrained,
        )?;
        w.json(&format!("{MODEL_DIR}/fusion.json"), &m.fusion)?;
        w.json(&format!("{MODEL_DIR}/temperature.json"), &m.temperature)?;
        w.csv("scores.csv", &output.scores, &SCORE_HEADER)?;
        let p = &output.plots;
        w.csv(
            &format!("{PLOT_DIR}/reliability.csv"),
            &p.reliability,
            &[
                "variant",
                "bin_lower",
                "bin_upper",
                "count",
                "mean_score",
                "mean_label",
            ],
        )?;
        w.csv(
            &format!("{PLOT_DIR}/week_trend.csv"),
            &p.week_trend,
            &["variant", "week", "auc_pr"],
        )?;
        w.csv(
            &format!("{PLOT_DIR}/fairness_tradeoff.csv"),
            &p.fairness_tradeoff,
            &["variant", "dp_gap", "eo_gap", "auc_pr", "auc_roc"],
        )?;
        w.csv(
            &format!("{PLOT_DIR}/variant_auc_pr.csv"),
            &p.variant_auc_pr,
            &[
                "variant",
                "auc_roc",
                "auc_pr",
                "recall_at_fpr",
                "brier",
                "ece",
            ],
        )?;
        w.json("explanations.json", &output.explanations)?;
        if output.synthetic {
            let dir = out.join(DATA_DIR);
            w.ensure_dir(&dir)?;
            let paths = data::write_tables(&output.dataset, &dir)?;
            w.written.extend(paths);
        }
        // report last: its presence marks a complete run
        let p = w.path("report.json")?;
        fs::write(p, output.report.to_json()?)?;
        Ok(())
    })();
    match result {
        Ok(()) => Ok(w.written.clone()),
        Err(e) => {
            w.rollback();
            Err(e.in_stage("write"))
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        message: if e.kind() == std::io::ErrorKind::NotFound {
            "model artifact is missing".to_string()
        } else {
            e.to_string()
        },
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Loads persisted models from a run directory (or its `models/` subdirectory).
pub fn load_models(dir: &Path) -> Result<ModelBundle> {
    let models = if dir.join(MODEL_DIR).is_dir() {
        dir.join(MODEL_DIR)
    } else {
        dir.to_path_buf()
    };
    let bundle = ModelBundle {
        preprocessor: read_json(&models.join("preprocessor.json"))?,
        bnn: read_json(&models.join("bnn.json"))?,
        gbdt: read_json(&models.join("gbdt.json"))?,
        gbdt_unconstrained: read_json(&models.join("gbdt_unconstrained.json"))?,
        fusion: read_json(&models.join("fusion.json"))?,
        temperature: read_json(&models.join("temperature.json"))?,
    };
    bundle.check_versions()?;
    Ok(bundle)
}

fn load_for_scoring(base: &Path, aux: &[PathBuf]) -> Result<Dataset> {
    data::load_tables_with(
        base,
        aux,
        &LoadOptions {
            require_target: false,
            ..LoadOptions::default()
        },
    )
}

/// Scores a base CSV (plus auxiliary CSVs) with persisted models.
pub fn score(model_dir: &Path, base: &Path, aux: &[PathBuf]) -> Result<Vec<ScoredRow>> {
    let models = load_models(model_dir)?;
    let ds = load_for_scoring(base, aux)?;
    if ds.is_empty() {
        return Ok(Vec::new());
    }
    let design = models.preprocessor.transform(&ds.all())?;
    models.score_design(&design)
}

/// Attribution for one case, keeping the `k` largest contributions.
pub fn explain_case(
    model_dir: &Path,
    base: &Path,
    aux: &[PathBuf],
    case_id: i64,
    k: usize,
) -> Result<Attribution> {
    let models = load_models(model_dir)?;
    let ds = load_for_scoring(base, aux)?;
    let idx = ds
        .rows
        .iter()
        .position(|r| r.case_id == case_id)
        .ok_or_else(|| {
            Error::NotFound(format!("case_id {case_id} is not in {}", base.display()))
        })?;
    let design = models.preprocessor.transform(&ds.view(vec![idx]))?;
    let x = design.x.row(0).to_vec();
    let mut attribution = explain_row(&models.gbdt, &x, &design.column_names, Some(case_id))?;
    attribution.contributions.truncate(k);
    Ok(attribution)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Self { mean, std }
    }
}

/// Per-variant mean and population standard deviation across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub seeds: Vec<u64>,
    pub metrics: BTreeMap<String, BTreeMap<String, MeanStd>>,
}

pub fn aggregate(reports: &[ScoreReport]) -> Aggregate {
    let mut metrics: BTreeMap<String, BTreeMap<String, MeanStd>> = BTreeMap::new();
    for variant in VARIANTS {
        let collect = |f: &dyn Fn(&ScoreReport) -> Option<f64>| -> Vec<f64> {
            reports.iter().filter_map(f).collect()
        };
        let m = |f: fn(&MetricBundle) -> f64| move |r: &ScoreReport| r.metrics.get(variant).map(f);
        let mut entry = BTreeMap::new();
        entry.insert("auc_roc".into(), MeanStd::of(&collect(&m(|b| b.auc_roc))));
        entry.insert("auc_pr".into(), MeanStd::of(&collect(&m(|b| b.auc_pr))));
        entry.insert(
            "recall_at_fpr".into(),
            MeanStd::of(&collect(&m(|b| b.recall_at_fpr))),
        );
        entry.insert("brier".into(), MeanStd::of(&collect(&m(|b| b.brier))));
        entry.insert("ece".into(), MeanStd::of(&collect(&m(|b| b.ece))));
        entry.insert(
            "dp_gap".into(),
            MeanStd::of(&collect(&|r| {
                r.fairness_test.get(variant).map(|g| g.dp_gap)
            })),
        );
        entry.insert(
            "eo_gap".into(),
            MeanStd::of(&collect(&|r| {
                r.fairness_test.get(variant).map(|g| g.eo_gap)
            })),
        );
        entry.insert(
            "stability_drop".into(),
            MeanStd::of(&collect(&|r| r.stability.get(variant).map(|s| s.drop))),
        );
        metrics.insert(variant.to_string(), entry);
    }
    Aggregate {
        seeds: reports.iter().map(|r| r.seed).collect(),
        metrics,
    }
}

/// Runs `n` consecutive seeds starting at `cfg.seed`, writing each under
/// `out/seed_<s>` and the aggregate to `out/aggregate.json`.
pub fn run_seeds(cfg: &RunConfig, n: usize, out: &Path) -> Result<Aggregate> {
    let mut reports = Vec::with_capacity(n);
    for k in 0..n as u64 {
        let seed_cfg = RunConfig {
            seed: cfg.seed + k,
            ..cfg.clone()
        };
        let output = run(&seed_cfg)?;
        write_run(&out.join(format!("seed_{}", seed_cfg.seed)), &output)?;
        reports.push(output.report);
    }
    let agg = aggregate(&reports);
    let mut s = serde_json::to_string_pretty(&agg)?;
    s.push('\n');
    fs::write(out.join("aggregate.json"), s)?;
    Ok(agg)
}

/// Collects `report.json` from `dir` or its `seed_*` subdirectories.
pub fn collect_reports(dir: &Path) -> Result<Vec<ScoreReport>> {
    let direct = dir.join("report.json");
    if direct.is_file() {
        return Ok(vec![read_json(&direct)?]);
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Load {
            path: dir.to_path_buf(),
            message: e.to_string(),
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("report.json").is_file())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(Error::NotFound(format!(
            "no report.json under {}",
            dir.display()
        )));
    }
    subdirs
        .iter()
        .map(|p| read_json(&p.join("report.json")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config() -> RunConfig {
        RunConfig {
            data: DataSource::Synth {
                synth: SynthConfig {
                    n_rows: 1500,
                    n_features: 5,
                    n_weeks: 20,
                    ..SynthConfig::default()
                },
            },
            split: TimeSplit {
                cut_week: 13,
                val_weeks: 4,
            },
            bnn: BnnConfig {
                hidden: vec![8],
                epochs: 3,
                predict_samples: 5,
                ..BnnConfig::default()
            },
            gbdt: GbdtParams {
                n_rounds: 10,
                ..GbdtParams::default()
            },
            explain_top_k: 3,
            ..RunConfig::default()
        }
    }

    #[test]
    fn config_json_round_trip_and_defaults() {
        let cfg = small_config();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let partial: RunConfig = serde_json::from_str(r#"{"seed": 4}"#).unwrap();
        assert_eq!(partial.seed, 4);
        assert_eq!(partial.gbdt, GbdtParams::default());
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 4}"#).is_err());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut cfg = small_config();
        cfg.gbdt.delta_max = 1.5;
        assert!(matches!(
            run(&cfg).unwrap_err().kind(),
            crate::ErrorKind::Config
        ));
        let cfg = RunConfig {
            data: DataSource::Files {
                base: "/nonexistent/base.csv".into(),
                aux: vec![],
                group_column: "group".into(),
            },
            ..small_config()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn small_run_is_consistent() {
        let out = run(&small_config()).unwrap();
        let r = &out.report;
        assert_eq!(
            r.partitions.train + r.partitions.val + r.partitions.test,
            1500
        );
        assert_eq!(r.metrics.len(), 5);
        assert_eq!(out.scores.len(), 1500);
        assert_eq!(out.explanations.len(), 3);
        for a in &out.explanations {
            assert!((a.base_value + a.total() - a.margin).abs() < 1e-9);
        }
        for s in &out.scores {
            assert!(((s.mu_bnn * (1.0 - s.mu_bnn)) - (s.u_ale + s.u_epi)).abs() < 1e-12);
        }
        assert!(r.temperature.val_nll_after <= r.temperature.val_nll_before + 1e-9);
    }

    #[test]
    fn disabled_constraint_matches_twin() {
        let mut cfg = small_config();
        cfg.gbdt.lambda_fair = 0.0;
        let out = run(&cfg).unwrap();
        assert_eq!(
            out.report.metrics[VARIANT_GBDT],
            out.report.metrics[VARIANT_FAIR_GBDT]
        );
    }
}
