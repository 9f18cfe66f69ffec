//! Experiment configuration, dataset persistence, the method grid and the
//! ablation drivers.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::ContrastiveKind;
use crate::metrics::{self, MetricRecord, Report, TableRow};
use crate::model::{HeadKind, ModelConfig};
use crate::phantom::{
    generate_corpus, load_volume, save_volume, stratify, Corpus, DatasetSplit, DomainProfile, DomainTag, Geometry,
    SliceRef, StratifyConfig,
};
use crate::trainer::{self, Checkpoint, LogLine, PairKind, Regime, RunOptions, TrainConfig, TrainData, TrainOutcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub geometry: Geometry,
    pub num_classes: usize,
    pub source_volumes: usize,
    pub target_volumes: usize,
    pub source_profile: DomainProfile,
    pub target_profile: DomainProfile,
    pub stratify: StratifyConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            geometry: Geometry::desk(),
            num_classes: 4,
            source_volumes: 40,
            target_volumes: 60,
            source_profile: DomainProfile::source(),
            target_profile: DomainProfile::target(),
            stratify: StratifyConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub lambdas: Vec<f64>,
    pub fractions: Vec<f64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            lambdas: vec![0.1, 1.0, 20.0, 100.0],
            fractions: vec![0.25, 0.5, 1.0],
        }
    }
}

/// One method of the comparison grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub name: String,
    pub regime: Regime,
    pub contrastive_kind: ContrastiveKind,
    pub pair_kind: PairKind,
    pub head_kind: HeadKind,
}

impl MethodSpec {
    fn new(name: &str, regime: Regime, kind: ContrastiveKind, pair: PairKind, head: HeadKind) -> Self {
        Self {
            name: name.into(),
            regime,
            contrastive_kind: kind,
            pair_kind: pair,
            head_kind: head,
        }
    }

    /// Model and training configs for this method.
    pub fn apply(&self, model: &ModelConfig, train: &TrainConfig) -> (ModelConfig, TrainConfig) {
        let mut m = model.clone();
        m.head_kind = self.head_kind;
        let mut t = train.clone();
        t.regime = self.regime;
        t.pair_kind = self.pair_kind;
        t.loss.contrastive_kind = self.contrastive_kind;
        (m, t)
    }
}

/// Baseline, upper bound, pretrain-then-finetune with both contrastive
/// losses, and the joint variants over pair generators and heads.
pub fn default_grid() -> Vec<MethodSpec> {
    use ContrastiveKind::{Clr, Siam};
    use HeadKind::{Ch, Pool};
    use PairKind::{Augm, Comb, Slice};
    let mut g = vec![
        MethodSpec::new("Baseline", Regime::Baseline, Clr, Augm, Pool),
        MethodSpec::new("UpperBound", Regime::UpperBound, Clr, Augm, Pool),
        MethodSpec::new("SimCLR", Regime::PretrainFinetune, Clr, Augm, Pool),
        MethodSpec::new("SimSiam", Regime::PretrainFinetune, Siam, Augm, Pool),
    ];
    for (prefix, kind) in [("SegCLR", Clr), ("SegSiam", Siam)] {
        for (pair, head, label) in [
            (Augm, Pool, "P_augm,C_pool"),
            (Slice, Pool, "P_slice,C_pool"),
            (Comb, Pool, "P_comb,C_pool"),
            (Comb, Ch, "P_comb,C_ch"),
        ] {
            g.push(MethodSpec::new(
                &format!("{prefix}({label})"),
                Regime::Joint,
                kind,
                pair,
                head,
            ));
        }
    }
    g
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
    /// Methods run by the grid; empty means [`default_grid`].
    #[serde(default)]
    pub grid: Vec<MethodSpec>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.data.geometry.validate()?;
        self.data.source_profile.validate()?;
        self.data.target_profile.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let g = &self.data.geometry;
        if [g.height, g.width] != self.model.input_size {
            return Err(Error::Config(format!(
                "model input_size {:?} differs from slice size [{}, {}]",
                self.model.input_size, g.height, g.width
            )));
        }
        if self.model.num_classes != self.data.num_classes {
            return Err(Error::Config(format!(
                "model has {} classes, data has {}",
                self.model.num_classes, self.data.num_classes
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> Vec<MethodSpec> {
        if self.grid.is_empty() {
            default_grid()
        } else {
            self.grid.clone()
        }
    }
}

/// Generate the phantom corpus and its split.
pub fn generate_dataset(cfg: &ExperimentConfig) -> Result<(Corpus, DatasetSplit)> {
    let d = &cfg.data;
    let corpus = generate_corpus(
        &d.geometry,
        d.num_classes,
        d.source_volumes,
        d.target_volumes,
        &d.source_profile,
        &d.target_profile,
        cfg.seed,
    )?;
    let split = stratify(&corpus.metas(), &d.stratify, cfg.seed)?;
    Ok((corpus, split))
}

pub const SPLIT_FILE: &str = "split.json";
pub const VOLUME_EXT: &str = "vol";

/// Write every volume (with its mask) and the split manifest under `dir`.
pub fn write_dataset(dir: &Path, corpus: &Corpus, split: &DatasetSplit) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (id, (vol, mask)) in &corpus.volumes {
        save_volume(dir.join(format!("{id}.{VOLUME_EXT}")), vol, Some(mask))?;
    }
    let manifest = serde_json::to_string_pretty(split)? + "\n";
    let p = dir.join(SPLIT_FILE);
    fs::write(&p, manifest).map_err(|e| Error::io(&p, e))
}

/// Load a dataset written by [`write_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(Corpus, DatasetSplit)> {
    let p = dir.join(SPLIT_FILE);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let split: DatasetSplit = serde_json::from_str(&text)?;
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == VOLUME_EXT))
        .collect();
    entries.sort();
    let mut corpus = Corpus::default();
    for path in entries {
        let (vol, mask) = load_volume(&path)?;
        let mask = mask.ok_or_else(|| Error::Invalid(format!("{} has no mask", path.display())))?;
        corpus.volumes.insert(vol.volume_id.clone(), (vol, mask));
    }
    split.validate()?;
    Ok((corpus, split))
}

fn test_refs(split: &DatasetSplit, domain: DomainTag) -> &[SliceRef] {
    match domain {
        DomainTag::Source => &split.test_source,
        DomainTag::Target => &split.test_target,
    }
}

/// Per-slice metrics of a checkpoint on one domain's test slices.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    method: &str,
    corpus: &Corpus,
    split: &DatasetSplit,
    domain: DomainTag,
) -> Result<Vec<MetricRecord>> {
    let refs = test_refs(split, domain);
    if refs.is_empty() {
        return Err(Error::Invalid(format!("no {domain} test slices in the split")));
    }
    let samples = refs
        .iter()
        .map(|r| corpus.labeled_slice(r))
        .collect::<Result<Vec<_>>>()?;
    let spacing = corpus.volume(&refs[0].volume_id)?.spacing_um;
    metrics::evaluate(&ckpt.net.unet, method, &samples, &ckpt.class_names, spacing)
}

/// Train one method and evaluate it on both test domains.
pub struct MethodRun {
    pub spec: MethodSpec,
    pub outcome: TrainOutcome,
    pub source: Vec<MetricRecord>,
    pub target: Vec<MetricRecord>,
}

pub fn run_method(
    spec: &MethodSpec,
    model: &ModelConfig,
    train: &TrainConfig,
    corpus: &Corpus,
    split: &DatasetSplit,
) -> Result<MethodRun> {
    let (m, t) = spec.apply(model, train);
    let data = TrainData::new(corpus, split);
    log::info!("training {}", spec.name);
    let outcome = trainer::train(&m, &t, &data, &RunOptions::default())?;
    let source = evaluate_checkpoint(&outcome.checkpoint, &spec.name, corpus, split, DomainTag::Source)?;
    let target = evaluate_checkpoint(&outcome.checkpoint, &spec.name, corpus, split, DomainTag::Target)?;
    Ok(MethodRun {
        spec: spec.clone(),
        outcome,
        source,
        target,
    })
}

fn reports_against(run: &MethodRun, baseline: &MethodRun) -> Result<Vec<Report>> {
    Ok(vec![
        Report {
            method: run.spec.name.clone(),
            domain: DomainTag::Target,
            rows: metrics::relativize(&run.target, &baseline.target)?,
        },
        Report {
            method: run.spec.name.clone(),
            domain: DomainTag::Source,
            rows: metrics::relativize(&run.source, &baseline.source)?,
        },
    ])
}

fn all_row(rows: &[TableRow]) -> &TableRow {
    rows.last().expect("tables end with the all-class row")
}

/// Grid results: per-class reports plus one summary line per method.
pub struct GridReport {
    pub reports: Vec<Report>,
    pub runs: Vec<MethodRun>,
}

impl GridReport {
    /// One line per method: all-class Dice and UVD on both domains.
    pub fn summary_table(&self) -> String {
        let mut s = format!(
            "{:<24} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}\n",
            "method", "tgt_dice", "tgt_rel", "tgt_uvd", "tgt_urel", "src_dice", "src_rel", "src_uvd", "src_urel"
        );
        for pair in self.reports.chunks(2) {
            let (t, src) = (all_row(&pair[0].rows), all_row(&pair[1].rows));
            let f = |v: Option<f64>| format!("{:.2}", v.unwrap_or(0.0));
            s += &format!(
                "{:<24} {:>10.2} {:>10} {:>10.2} {:>10} {:>10.2} {:>10} {:>10.2} {:>10}\n",
                pair[0].method,
                t.dice_abs,
                f(t.dice_rel),
                t.uvd_abs,
                f(t.uvd_rel),
                src.dice_abs,
                f(src.dice_rel),
                src.uvd_abs,
                f(src.uvd_rel)
            );
        }
        s
    }
}

/// Train and evaluate every method; metrics are relative to the first
/// baseline-regime method (trained even if absent from `methods`).
pub fn run_grid(
    methods: &[MethodSpec],
    model: &ModelConfig,
    train: &TrainConfig,
    corpus: &Corpus,
    split: &DatasetSplit,
) -> Result<GridReport> {
    let runs = methods
        .iter()
        .map(|m| run_method(m, model, train, corpus, split))
        .collect::<Result<Vec<_>>>()?;
    let extra;
    let baseline = match runs.iter().find(|r| r.spec.regime == Regime::Baseline) {
        Some(b) => b,
        None => {
            extra = run_method(&default_grid()[0], model, train, corpus, split)?;
            &extra
        }
    };
    let mut reports = Vec::new();
    for r in &runs {
        reports.extend(reports_against(r, baseline)?);
    }
    Ok(GridReport { reports, runs })
}

/// One ablation setting and its all-class results per domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: f64,
    pub target_dice: f64,
    pub target_rel: f64,
    pub source_dice: f64,
    pub source_rel: f64,
}

pub const REFERENCE_LAMBDA: f64 = 20.0;

/// Joint training per λ, reported relative to the λ = 20 run. The reference
/// is trained even when 20 is not among `lambdas`.
pub fn run_lambda_ablation(
    model: &ModelConfig,
    base: &TrainConfig,
    lambdas: &[f64],
    corpus: &Corpus,
    split: &DatasetSplit,
) -> Result<Vec<AblationRow>> {
    let spec = MethodSpec {
        name: String::new(),
        regime: Regime::Joint,
        contrastive_kind: base.loss.contrastive_kind,
        pair_kind: base.pair_kind,
        head_kind: model.head_kind,
    };
    let run = |lambda: f64| {
        let mut t = base.clone();
        t.loss.lambda = lambda;
        let s = MethodSpec {
            name: format!("lambda={lambda}"),
            ..spec.clone()
        };
        run_method(&s, model, &t, corpus, split)
    };
    let reference = run(REFERENCE_LAMBDA)?;
    let mut rows = Vec::new();
    for &l in lambdas {
        let r = if l == REFERENCE_LAMBDA { None } else { Some(run(l)?) };
        let r = r.as_ref().unwrap_or(&reference);
        let rep = reports_against(r, &reference)?;
        let (t, s) = (all_row(&rep[0].rows), all_row(&rep[1].rows));
        rows.push(AblationRow {
            setting: l,
            target_dice: t.dice_abs,
            target_rel: t.dice_rel.unwrap_or(0.0),
            source_dice: s.dice_abs,
            source_rel: s.dice_rel.unwrap_or(0.0),
        });
    }
    Ok(rows)
}

/// For each fraction, train a baseline and a joint model on the reduced
/// labeled set (validation unchanged) and report joint-minus-baseline Dice
/// per domain. Subsets are nested across fractions.
pub fn run_labeled_fraction_ablation(
    model: &ModelConfig,
    base: &TrainConfig,
    fractions: &[f64],
    corpus: &Corpus,
    split: &DatasetSplit,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &f in fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Config(format!("fraction {f} outside (0, 1]")));
        }
        let mut t = base.clone();
        t.labeled_fraction = f;
        let b = MethodSpec {
            name: format!("Baseline@{f}"),
            regime: Regime::Baseline,
            contrastive_kind: t.loss.contrastive_kind,
            pair_kind: t.pair_kind,
            head_kind: model.head_kind,
        };
        let j = MethodSpec {
            name: format!("Joint@{f}"),
            regime: Regime::Joint,
            ..b.clone()
        };
        let base_run = run_method(&b, model, &t, corpus, split)?;
        let joint_run = run_method(&j, model, &t, corpus, split)?;
        let rep = reports_against(&joint_run, &base_run)?;
        let (tr, sr) = (all_row(&rep[0].rows), all_row(&rep[1].rows));
        rows.push(AblationRow {
            setting: f,
            target_dice: tr.dice_abs,
            target_rel: tr.dice_rel.unwrap_or(0.0),
            source_dice: sr.dice_abs,
            source_rel: sr.dice_rel.unwrap_or(0.0),
        });
    }
    Ok(rows)
}

pub fn ablation_to_csv(setting_name: &str, rows: &[AblationRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Invalid(format!("csv: {e}"));
    w.write_record([setting_name, "target_dice", "target_rel", "source_dice", "source_rel"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.setting.to_string(),
            format!("{:.4}", r.target_dice),
            format!("{:.4}", r.target_rel),
            format!("{:.4}", r.source_dice),
            format!("{:.4}", r.source_rel),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Line chart of relative Dice per domain against the ablated setting.
pub fn ablation_plot(path: &Path, title: &str, x_label: &str, rows: &[AblationRow], log_x: bool) -> Result<()> {
    use plotters::prelude::*;
    let plot_err = |e: String| Error::Invalid(format!("plot {}: {e}", path.display()));
    let xs: Vec<f64> = rows
        .iter()
        .map(|r| if log_x { r.setting.log10() } else { r.setting })
        .collect();
    let ys = rows.iter().flat_map(|r| [r.target_rel, r.source_rel]);
    let (ymin, ymax) = ys.fold((0.0f64, 0.0f64), |(a, b), y| (a.min(y), b.max(y)));
    let pad = ((ymax - ymin) * 0.1).max(1.0);
    let (xmin, xmax) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let (xmin, xmax) = if xmin == xmax {
        (xmin - 1.0, xmax + 1.0)
    } else {
        (xmin, xmax)
    };
    let root = SVGBackend::new(path, (640, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(xmin..xmax, (ymin - pad)..(ymax + pad))
        .map_err(|e| plot_err(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc(if log_x {
            format!("log10 {x_label}")
        } else {
            x_label.to_string()
        })
        .y_desc("relative Dice (points)")
        .draw()
        .map_err(|e| plot_err(e.to_string()))?;
    for (name, color, pick) in [
        (
            "target",
            RED,
            (|r: &AblationRow| r.target_rel) as fn(&AblationRow) -> f64,
        ),
        ("source", BLUE, |r: &AblationRow| r.source_rel),
    ] {
        let pts: Vec<(f64, f64)> = xs.iter().zip(rows).map(|(&x, r)| (x, pick(r))).collect();
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(|e| plot_err(e.to_string()))?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        chart
            .draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled())))
            .map_err(|e| plot_err(e.to_string()))?;
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(e.to_string()))?;
    root.present().map_err(|e| plot_err(e.to_string()))?;
    Ok(())
}

/// Write a log as JSON lines.
pub fn write_log(path: &Path, log: &[LogLine]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, trainer::log_to_jsonl(log)).map_err(|e| Error::io(path, e))
}
