//! Config-driven experiment pipeline: simulate, train, rPIE, analyze, report.
//!
//! Every stage reads from and writes to one run directory, and echoes the
//! configuration it ran with as `config.json`.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    boundary_interior_ratio, common_region_sd, embed_and_cluster, mean_and_sd, mode_misfit_histogram,
    phase_map_and_ssim, psnr, wrapped_phase, PosteriorEnsemble,
};
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowModel};
use crate::geometry::{make_ground_truth, GroundTruth, GroundTruthSource, Probe, ProbeKind, ScanGeometry};
use crate::io;
use crate::objective::{Objective, ObjectiveConfig};
use crate::physics::{simulate as simulate_data, ComplexField, DiffractionData};
use crate::rpie::{rpie_reconstruct, RpieConfig, RpieInit};
use crate::trainer::{Checkpoint, TrainConfig, TrainLog, Trainer};

pub const CONFIG_FILE: &str = "config.json";
pub const DATA_STEM: &str = "data";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.npy";
pub const GROUND_TRUTH_MAGNITUDE_FILE: &str = "ground_truth_magnitude.npy";
pub const GROUND_TRUTH_PHASE_FILE: &str = "ground_truth_phase.npy";
pub const PROBE_FILE: &str = "probe.npy";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const RPIE_ESTIMATE_FILE: &str = "rpie_estimate.npy";
pub const RPIE_RESIDUAL_FILE: &str = "rpie_residuals.csv";
pub const ANALYSIS_DIR: &str = "analysis";
pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: [&str; 8] = [
    "setting",
    "fov",
    "overlap",
    "method",
    "mode",
    "psnr_mag",
    "ssim_phase",
    "boundary_interior_ratio",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySpec {
    pub probe_size: usize,
    pub scans_per_axis: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    pub blocks: usize,
    pub clamp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub lambda: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: Option<f64>,
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RpieSpec {
    pub iterations: usize,
    pub alpha: f64,
    pub init: RpieInit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSpec {
    /// Posterior samples drawn for the statistics.
    pub samples: usize,
    /// Number of modes to cluster into.
    pub k: usize,
    pub restarts: usize,
    /// Border width for the boundary/interior SD ratio.
    pub border: usize,
}

/// A complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub seed: u64,
    pub geometry: GeometrySpec,
    pub noise_percent: f64,
    #[serde(default)]
    pub probe: ProbeKind,
    pub ground_truth: GroundTruthSource,
    pub flow: FlowSpec,
    pub train: TrainSpec,
    pub rpie: RpieSpec,
    pub analysis: AnalysisSpec,
}

/// Per-stage seeds derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedPlan {
    pub ground_truth: u64,
    pub noise: u64,
    pub flow: u64,
    pub train: u64,
    pub rpie: u64,
    pub analysis: u64,
}

impl SeedPlan {
    pub fn from_master(seed: u64) -> Self {
        Self {
            ground_truth: seed,
            noise: seed.wrapping_add(1),
            flow: seed.wrapping_add(2),
            train: seed.wrapping_add(3),
            rpie: seed.wrapping_add(4),
            analysis: seed.wrapping_add(5),
        }
    }
}

const PRESETS: [(&str, &str); 5] = [
    ("S1", include_str!("../presets/s1.json")),
    ("S2", include_str!("../presets/s2.json")),
    ("S3", include_str!("../presets/s3.json")),
    ("T1", include_str!("../presets/t1.json")),
    ("T1-S4", include_str!("../presets/t1-s4.json")),
];

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}

impl ExperimentConfig {
    /// Looks up a bundled preset by name (case-insensitive).
    pub fn preset(name: &str) -> Result<Self> {
        let (_, text) = PRESETS
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown preset {name:?}; available: {}",
                    preset_names().join(", ")
                ))
            })?;
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        let config: Self =
            serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        io::create_dir(dir)?;
        io::write_json(dir.join(CONFIG_FILE), self)
    }

    pub fn seeds(&self) -> SeedPlan {
        SeedPlan::from_master(self.seed)
    }

    pub fn scan_geometry(&self) -> Result<ScanGeometry> {
        let g = self.geometry;
        ScanGeometry::new(g.probe_size, g.scans_per_axis, g.stride)
    }

    pub fn flow_config(&self) -> FlowConfig {
        let n = self.scan_geometry().map(|g| g.fov_size()).unwrap_or(0);
        let mut fc = FlowConfig::for_object(n, self.flow.blocks, self.seeds().flow);
        fc.clamp = self.flow.clamp;
        fc
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = self.train;
        TrainConfig {
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            lambda: t.lambda,
            seed: self.seeds().train,
            clip_norm: t.clip_norm,
            checkpoint_every: t.checkpoint_every,
        }
    }

    pub fn rpie_config(&self) -> RpieConfig {
        RpieConfig {
            iterations: self.rpie.iterations,
            alpha: self.rpie.alpha,
            seed: self.seeds().rpie,
            init: self.rpie.init,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scan_geometry()?;
        if !(self.noise_percent >= 0.0) {
            return Err(Error::InvalidConfig("noise_percent must be non-negative".into()));
        }
        self.flow_config().validate()?;
        self.train_config().validate()?;
        if !(self.train.lambda >= 0.0) {
            return Err(Error::InvalidConfig("lambda must be non-negative".into()));
        }
        self.rpie_config().validate()?;
        let a = self.analysis;
        if a.samples < 2 || a.k == 0 || a.k > a.samples {
            return Err(Error::InvalidConfig(
                "analysis needs samples >= 2 and 1 <= k <= samples".into(),
            ));
        }
        let n = self.scan_geometry()?.fov_size();
        if a.border == 0 || 2 * a.border >= n {
            return Err(Error::InvalidConfig(format!(
                "border {} must be in [1, n/2) with n = {n}",
                a.border
            )));
        }
        Ok(())
    }
}

/// Dataset files produced by [`simulate`].
#[derive(Debug, Clone)]
pub struct Dataset {
    pub ground_truth: GroundTruth,
    pub probe: Probe,
    pub data: DiffractionData,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let object: ComplexField = io::read_npy(dir.join(GROUND_TRUTH_FILE))?;
        let magnitude: Array2<f64> = io::read_npy(dir.join(GROUND_TRUTH_MAGNITUDE_FILE))?;
        let phase: Array2<f64> = io::read_npy(dir.join(GROUND_TRUTH_PHASE_FILE))?;
        if magnitude.dim() != object.dim() || phase.dim() != object.dim() {
            return Err(Error::format(dir, "ground-truth arrays disagree in shape"));
        }
        let probe = Probe::from_values(io::read_npy(dir.join(PROBE_FILE))?)?;
        let data = DiffractionData::load(dir, DATA_STEM)?;
        Ok(Self {
            ground_truth: GroundTruth {
                magnitude,
                phase,
                object,
            },
            probe,
            data,
        })
    }
}

fn require_dataset(config: &ExperimentConfig, dir: &Path) -> Result<Dataset> {
    if !dir.join(format!("{DATA_STEM}.npy")).exists() {
        return Err(Error::InvalidConfig(format!(
            "{} holds no dataset; run `simulate` first",
            dir.display()
        )));
    }
    let ds = Dataset::load(dir)?;
    if ds.data.geometry != config.scan_geometry()? {
        return Err(Error::InvalidConfig(
            "dataset geometry differs from the configuration".into(),
        ));
    }
    Ok(ds)
}

/// Generates ground truth, probe and noisy data into `dir`.
pub fn simulate(config: &ExperimentConfig, dir: &Path) -> Result<Dataset> {
    config.validate()?;
    config.save(dir)?;
    let seeds = config.seeds();
    let geometry = config.scan_geometry()?;
    let ground_truth = make_ground_truth(geometry.fov_size(), &config.ground_truth, seeds.ground_truth)?;
    let probe = Probe::new(geometry.probe_size(), &config.probe)?;
    let data = simulate_data(
        ground_truth.object.view(),
        &probe,
        &geometry,
        config.noise_percent,
        seeds.noise,
    )?;
    io::write_npy(dir.join(GROUND_TRUTH_FILE), &ground_truth.object)?;
    io::write_npy(dir.join(GROUND_TRUTH_MAGNITUDE_FILE), &ground_truth.magnitude)?;
    io::write_npy(dir.join(GROUND_TRUTH_PHASE_FILE), &ground_truth.phase)?;
    io::write_npy(dir.join(PROBE_FILE), probe.values())?;
    data.save(dir, DATA_STEM)?;
    log::info!(
        "simulated {} patterns of {}x{} (fov {}, sigma {:.3e})",
        geometry.num_scans(),
        geometry.probe_size(),
        geometry.probe_size(),
        geometry.fov_size(),
        data.sigma
    );
    Ok(Dataset {
        ground_truth,
        probe,
        data,
    })
}

fn save_progress(dir: &Path, checkpoint: &Checkpoint, log: &TrainLog) -> Result<()> {
    checkpoint.save(&dir.join(CHECKPOINT_DIR))?;
    log.write_csv(&dir.join(TRAIN_LOG_FILE))
}

/// Trains the flow on the dataset in `dir`, optionally resuming from its checkpoint.
///
/// On a numerical failure the last good state is written before the error is returned.
pub fn train(config: &ExperimentConfig, dir: &Path, resume: bool) -> Result<(Checkpoint, TrainLog)> {
    config.validate()?;
    let ds = require_dataset(config, dir)?;
    config.save(dir)?;
    let objective_config = ObjectiveConfig::for_data(&ds.data, config.train.lambda);
    let objective = Objective::new(&ds.data, &ds.probe, objective_config)?;
    let train_config = config.train_config();
    let (mut trainer, mut history) = if resume {
        let checkpoint = Checkpoint::load(&dir.join(CHECKPOINT_DIR))?;
        if checkpoint.model.config() != &config.flow_config() {
            return Err(Error::InvalidConfig(
                "checkpoint architecture differs from the configuration".into(),
            ));
        }
        let mut history = TrainLog::read_csv(&dir.join(TRAIN_LOG_FILE))?;
        history.records.truncate(checkpoint.epoch);
        log::info!("resuming at epoch {}", checkpoint.epoch);
        (Trainer::resume(&objective, checkpoint, train_config)?, history)
    } else {
        let model = FlowModel::new(config.flow_config())?;
        log::info!("training a flow with {} parameters", model.num_params());
        (Trainer::new(&objective, model, train_config)?, TrainLog::default())
    };
    let every = config.train.checkpoint_every;
    let done_before = history.records.len();
    let outcome = trainer.run_with(|t| {
        let record = t.log().records.last().expect("a step just ran");
        if record.epoch % 100 == 0 {
            log::info!(
                "epoch {} objective {:.6e} misfit {:.4e} tv {:.4e} logdet {:.4e}",
                record.epoch,
                record.objective,
                record.misfit,
                record.tv,
                record.logdet
            );
        }
        if every > 0 && t.epoch() % every == 0 && t.epoch() < config.train.epochs {
            let mut log = TrainLog {
                records: history.records.clone(),
            };
            log.records.extend(t.log().records.iter().cloned());
            save_progress(dir, t.checkpoint(), &log)?;
        }
        Ok(())
    });
    let (checkpoint, fresh) = trainer.into_parts();
    history.records.extend(fresh.records);
    debug_assert!(history.records.len() >= done_before);
    save_progress(dir, &checkpoint, &history)?;
    outcome?;
    Ok((checkpoint, history))
}

/// Runs the rPIE baseline on the dataset in `dir`.
pub fn rpie(config: &ExperimentConfig, dir: &Path) -> Result<crate::rpie::RpieResult> {
    config.validate()?;
    let ds = require_dataset(config, dir)?;
    config.save(dir)?;
    let result = rpie_reconstruct(&ds.data, &ds.probe, &config.rpie_config())?;
    io::write_npy(dir.join(RPIE_ESTIMATE_FILE), &result.estimate)?;
    let rows: Vec<Vec<String>> = result
        .residuals
        .iter()
        .enumerate()
        .map(|(i, r)| vec![(i + 1).to_string(), io::fmt_f64(*r)])
        .collect();
    io::write_csv(dir.join(RPIE_RESIDUAL_FILE), &["sweep", "residual"], &rows)?;
    if let Some(last) = result.residuals.last() {
        log::info!("rPIE finished {} sweeps, residual {last:.4e}", result.residuals.len());
    }
    Ok(result)
}

/// One row of the metrics table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub setting: String,
    pub fov: usize,
    pub overlap: f64,
    pub method: String,
    pub mode: String,
    pub psnr_mag: f64,
    pub ssim_phase: f64,
    pub boundary_interior_ratio: f64,
}

impl MetricsRow {
    fn cells(&self) -> Vec<String> {
        vec![
            self.setting.clone(),
            self.fov.to_string(),
            format!("{:.2}", self.overlap),
            self.method.clone(),
            self.mode.clone(),
            io::fmt_f64(self.psnr_mag),
            io::fmt_f64(self.ssim_phase),
            io::fmt_f64(self.boundary_interior_ratio),
        ]
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let cells: Vec<Vec<String>> = rows.iter().map(MetricsRow::cells).collect();
    io::write_csv(path, &METRICS_HEADER, &cells)
}

/// Summary of an analysis run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub setting: String,
    pub fov: usize,
    pub overlap: f64,
    pub samples: usize,
    pub psnr_mag: f64,
    pub ssim_phase: f64,
    pub mean_sd_phase: f64,
    pub mean_sd_magnitude: f64,
    pub boundary_interior_ratio: f64,
    pub rpie_psnr_mag: Option<f64>,
    pub rpie_ssim_phase: Option<f64>,
    pub mode_sizes: Vec<usize>,
    pub mode_mean_misfits: Vec<f64>,
}

fn write_map(
    dir: &Path,
    name: &str,
    map: &Array2<f64>,
    ranges: &mut serde_json::Map<String, serde_json::Value>,
) -> Result<()> {
    io::write_npy(dir.join(format!("{name}.npy")), map)?;
    let range = io::write_png(dir.join(format!("{name}.png")), map)?;
    ranges.insert(name.to_owned(), serde_json::to_value(range)?);
    Ok(())
}

fn object_metrics(magnitude: &Array2<f64>, phase: &Array2<f64>, gt: &GroundTruth) -> Result<(f64, f64)> {
    Ok((
        psnr(magnitude, &gt.magnitude)?,
        phase_map_and_ssim(phase, &gt.phase)?.ssim,
    ))
}

/// Samples the trained flow and writes maps, the mode report and the metrics table.
pub fn analyze(config: &ExperimentConfig, dir: &Path) -> Result<AnalysisSummary> {
    config.validate()?;
    let ds = require_dataset(config, dir)?;
    let ck_dir = dir.join(CHECKPOINT_DIR);
    if !ck_dir.exists() {
        return Err(Error::InvalidConfig(format!(
            "{} holds no checkpoint; run `train` first",
            dir.display()
        )));
    }
    let checkpoint = Checkpoint::load(&ck_dir)?;
    config.save(dir)?;
    let geometry = config.scan_geometry()?;
    let a = config.analysis;
    let seeds = config.seeds();
    let ensemble = PosteriorEnsemble::draw(
        &checkpoint.model,
        a.samples,
        seeds.analysis,
        ck_dir.display().to_string(),
    )?;
    let stats = ensemble.stats()?;
    let out = dir.join(ANALYSIS_DIR);
    io::create_dir(&out)?;
    let mut ranges = serde_json::Map::new();
    write_map(&out, "mean_magnitude", &stats.mean_magnitude, &mut ranges)?;
    write_map(&out, "sd_magnitude", &stats.sd_magnitude, &mut ranges)?;
    write_map(&out, "mean_phase", &stats.mean_phase, &mut ranges)?;
    write_map(&out, "sd_phase", &stats.sd_phase, &mut ranges)?;
    write_map(&out, "log10_sd_phase", &stats.sd_phase.mapv(f64::log10), &mut ranges)?;

    let report = embed_and_cluster(&ensemble, a.k, a.restarts, seeds.analysis)?;
    let sigma = ds.data.misfit_sigma();
    let groups = mode_misfit_histogram(&ensemble, &report.labels, &ds.data, &ds.probe, sigma)?;
    let mut per_sample = vec![0.0; ensemble.len()];
    for g in &groups {
        let idx = report
            .labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == g.label)
            .map(|(i, _)| i);
        for (i, m) in idx.zip(&g.misfits) {
            per_sample[i] = *m;
        }
    }
    let mode_rows: Vec<Vec<String>> = (0..ensemble.len())
        .map(|i| {
            vec![
                i.to_string(),
                io::fmt_f64(report.embedding[[i, 0]]),
                io::fmt_f64(report.embedding[[i, 1]]),
                report.labels[i].to_string(),
                io::fmt_f64(per_sample[i]),
            ]
        })
        .collect();
    io::write_csv(
        out.join("modes.csv"),
        &["sample_id", "pc1", "pc2", "label", "misfit"],
        &mode_rows,
    )?;
    let summary_rows: Vec<Vec<String>> = groups
        .iter()
        .map(|g| {
            vec![
                g.label.to_string(),
                g.misfits.len().to_string(),
                io::fmt_f64(g.mean),
                io::fmt_f64(g.median),
            ]
        })
        .collect();
    io::write_csv(
        out.join("mode_misfits.csv"),
        &["label", "count", "mean", "median"],
        &summary_rows,
    )?;

    let setting = config.name.clone();
    let (fov, overlap) = (geometry.fov_size(), geometry.overlap_ratio());
    let row = |method: &str, mode: String, psnr_mag: f64, ssim_phase: f64, ratio: f64| MetricsRow {
        setting: setting.clone(),
        fov,
        overlap,
        method: method.to_owned(),
        mode,
        psnr_mag,
        ssim_phase,
        boundary_interior_ratio: ratio,
    };
    let ratio = boundary_interior_ratio(&stats.sd_phase, a.border).unwrap_or(f64::NAN);
    let (psnr_mag, ssim_phase) = object_metrics(&stats.mean_magnitude, &stats.mean_phase, &ds.ground_truth)?;
    let mut rows = vec![row("NF", "all".into(), psnr_mag, ssim_phase, ratio)];
    for g in &groups {
        let members: Vec<&ComplexField> = ensemble
            .samples()
            .iter()
            .zip(&report.labels)
            .filter(|(_, &l)| l == g.label)
            .map(|(z, _)| z)
            .collect();
        let mags: Vec<Array2<f64>> = members.iter().map(|z| z.mapv(|v| v.norm())).collect();
        let phases: Vec<Array2<f64>> = members.iter().map(|z| z.mapv(wrapped_phase)).collect();
        let (mean_mag, sd_mag) = mean_and_sd(&mags);
        let (mean_phase, sd_phase) = mean_and_sd(&phases);
        let prefix = format!("mode{}", g.label);
        write_map(&out, &format!("{prefix}_mean_magnitude"), &mean_mag, &mut ranges)?;
        write_map(&out, &format!("{prefix}_sd_magnitude"), &sd_mag, &mut ranges)?;
        write_map(&out, &format!("{prefix}_mean_phase"), &mean_phase, &mut ranges)?;
        write_map(&out, &format!("{prefix}_sd_phase"), &sd_phase, &mut ranges)?;
        let mode_ratio = if members.len() >= 2 {
            boundary_interior_ratio(&sd_phase, a.border).unwrap_or(f64::NAN)
        } else {
            f64::NAN
        };
        let (p, s) = object_metrics(&mean_mag, &mean_phase, &ds.ground_truth)?;
        rows.push(row("NF", g.label.to_string(), p, s, mode_ratio));
    }
    let rpie_path = dir.join(RPIE_ESTIMATE_FILE);
    let (mut rpie_psnr, mut rpie_ssim) = (None, None);
    if rpie_path.exists() {
        let estimate: Array2<Complex64> = io::read_npy(&rpie_path)?;
        let (p, s) = object_metrics(
            &estimate.mapv(|z| z.norm()),
            &estimate.mapv(wrapped_phase),
            &ds.ground_truth,
        )?;
        rows.push(row("rPIE", "-".into(), p, s, f64::NAN));
        rpie_psnr = Some(p);
        rpie_ssim = Some(s);
    }
    io::write_json(out.join("maps.json"), &ranges)?;
    write_metrics(&dir.join(METRICS_FILE), &rows)?;
    let summary = AnalysisSummary {
        setting: config.name.clone(),
        fov,
        overlap,
        samples: ensemble.len(),
        psnr_mag,
        ssim_phase,
        mean_sd_phase: stats.sd_phase.mean().unwrap_or(0.0),
        mean_sd_magnitude: stats.sd_magnitude.mean().unwrap_or(0.0),
        boundary_interior_ratio: ratio,
        rpie_psnr_mag: rpie_psnr,
        rpie_ssim_phase: rpie_ssim,
        mode_sizes: groups.iter().map(|g| g.misfits.len()).collect(),
        mode_mean_misfits: groups.iter().map(|g| g.mean).collect(),
    };
    io::write_json(out.join("summary.json"), &summary)?;
    log::info!(
        "posterior mean PSNR {:.2} dB, phase SSIM {:.3}, boundary/interior SD {:.3}",
        psnr_mag,
        ssim_phase,
        ratio
    );
    Ok(summary)
}

/// Common-region phase SD of one run in a report.
#[derive(Debug, Clone, PartialEq)]
pub struct CommonRegionEntry {
    pub setting: String,
    pub fov: usize,
    pub overlap: f64,
    pub mean_sd_phase: f64,
}

/// Joins the metrics tables of several runs and compares phase SD over their
/// common centered region.
pub fn report(run_dirs: &[PathBuf], out: &Path) -> Result<Vec<CommonRegionEntry>> {
    if run_dirs.is_empty() {
        return Err(Error::InvalidConfig("report needs at least one run directory".into()));
    }
    let mut header = None;
    let mut rows = Vec::new();
    let mut maps = Vec::new();
    let mut geometries = Vec::new();
    let mut configs = Vec::new();
    for dir in run_dirs {
        let config = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
        let (h, r) = io::read_csv(dir.join(METRICS_FILE))?;
        if header.get_or_insert_with(|| h.clone()) != &h {
            return Err(Error::format(
                dir.join(METRICS_FILE),
                "metrics header differs between runs",
            ));
        }
        rows.extend(r);
        maps.push(io::read_npy::<f64, _>(dir.join(ANALYSIS_DIR).join("sd_phase.npy"))?);
        geometries.push(config.scan_geometry()?);
        configs.push(config);
    }
    io::create_dir(out)?;
    let header = header.expect("at least one run");
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    io::write_csv(out.join("report.csv"), &header_refs, &rows)?;
    let region = common_region_sd(&maps, &geometries)?;
    let mut entries = Vec::new();
    let mut cells = Vec::new();
    for ((config, g), (crop, mean)) in configs
        .iter()
        .zip(&geometries)
        .zip(region.crops.iter().zip(&region.means))
    {
        io::write_npy(
            out.join(format!("common_log10_sd_phase_{}.npy", config.name)),
            &crop.mapv(f64::log10),
        )?;
        cells.push(vec![
            config.name.clone(),
            g.fov_size().to_string(),
            format!("{:.2}", g.overlap_ratio()),
            region.side.to_string(),
            io::fmt_f64(*mean),
        ]);
        entries.push(CommonRegionEntry {
            setting: config.name.clone(),
            fov: g.fov_size(),
            overlap: g.overlap_ratio(),
            mean_sd_phase: *mean,
        });
    }
    io::write_csv(
        out.join("common_region_sd.csv"),
        &["setting", "fov", "overlap", "side", "mean_sd_phase"],
        &cells,
    )?;
    Ok(entries)
}
