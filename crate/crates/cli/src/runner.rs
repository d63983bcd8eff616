//! Stage-based experiment pipeline: dataset -> models -> attacks ->
//! baselines -> analysis -> report. Every stage's status lands in the run
//! manifest together with a checksummed index of emitted files; any
//! failure marks the stage and aborts the remainder.

use crate::config::{DatasetKind, ExperimentConfig};
use crate::dataset::{self, Dataset, SyntheticSpec};
use crate::manifest::{RunManifest, StageStatus};
use crate::pool::{parallel_map, worker_count};
use freqlab_core::analysis::{
    self, attention_correlation, attention_rollout, linearity_theta, recombination_study,
    region_distortion_histogram, spectrum_reduction_sweep,
};
use freqlab_core::attacks::{
    fgsm, optimize_attack, pgd, AttackConfig, AttackResult, Components, DEFAULT_EPSILON_GRID,
};
use freqlab_core::metrics::{build_asr_curve, psnr, QualityAxis};
use freqlab_core::models::{
    load_checkpoint, save_checkpoint, train, Cnn, CnnConfig, Model, TrainConfig, Vit, VitConfig,
};
use freqlab_core::spectral::{make_region_partition, SpectrumComponent, NUM_REGIONS};
use freqlab_core::tensor::Tensor;
use freqlab_core::Real;
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug)]
pub struct RunError {
    pub stage: &'static str,
    pub message: String,
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage '{}' failed: {}", self.stage, self.message)
    }
}

impl std::error::Error for RunError {}

fn stage_err(stage: &'static str, e: impl fmt::Display) -> RunError {
    RunError { stage, message: e.to_string() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Dataset,
    Models,
    Attack,
    Baselines,
    Analysis,
    Report,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Dataset => "dataset",
            Stage::Models => "models",
            Stage::Attack => "attack",
            Stage::Baselines => "baselines",
            Stage::Analysis => "analysis",
            Stage::Report => "report",
        }
    }
}

/// Train/validation/test splits.
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Per-(model, components) attack outputs kept for later stages.
pub struct AttackRun {
    pub model_name: String,
    pub components: Components,
    /// Indices into the attacked image set, per result row.
    pub rows: Vec<(usize, Real, AttackResult)>,
}

/// In-memory products of the pipeline.
pub struct RunState {
    pub splits: Option<Splits>,
    pub models: Vec<(String, Model)>,
    /// Correctly-classified test images selected per model.
    pub attack_sets: BTreeMap<String, (Vec<Tensor>, Vec<usize>)>,
    pub attack_runs: Vec<AttackRun>,
}

impl RunState {
    fn new() -> Self {
        RunState {
            splits: None,
            models: Vec::new(),
            attack_sets: BTreeMap::new(),
            attack_runs: Vec::new(),
        }
    }
}

pub struct Runner {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub manifest: RunManifest,
    pub state: RunState,
    pub quiet: bool,
}

impl Runner {
    pub fn new(cfg: ExperimentConfig, out: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(out)?;
        let manifest = RunManifest::new(cfg.hash());
        Ok(Runner { cfg, out: out.to_path_buf(), manifest, state: RunState::new(), quiet: false })
    }

    fn log(&self, msg: &str) {
        if !self.quiet {
            eprintln!("[freqlab] {msg}");
        }
    }

    fn emit(&mut self, rel: &str, content: &str) -> Result<(), RunError> {
        let path = self.out.join(rel);
        std::fs::write(&path, content).map_err(|e| stage_err("io", e))?;
        self.manifest.record_file(&self.out, rel).map_err(|e| stage_err("io", e))?;
        Ok(())
    }

    /// Run the given stages in order, recording status and saving the
    /// manifest even when a stage fails.
    pub fn run(&mut self, stages: &[Stage]) -> Result<(), RunError> {
        let mut failure: Option<RunError> = None;
        for &stage in stages {
            if failure.is_some() {
                self.manifest.record_stage(stage.name(), StageStatus::Skipped, 0.0);
                continue;
            }
            let t0 = Instant::now();
            let result = match stage {
                Stage::Dataset => self.stage_dataset(),
                Stage::Models => self.stage_models(),
                Stage::Attack => self.stage_attack(),
                Stage::Baselines => self.stage_baselines(),
                Stage::Analysis => self.stage_analysis(),
                Stage::Report => self.stage_report(),
            };
            let seconds = t0.elapsed().as_secs_f64();
            match result {
                Ok(()) => {
                    self.manifest.record_stage(stage.name(), StageStatus::Ok, seconds);
                    self.log(&format!("stage {} ok ({seconds:.1}s)", stage.name()));
                }
                Err(e) => {
                    self.manifest
                        .record_stage(stage.name(), StageStatus::Failed(e.message.clone()), seconds);
                    self.log(&format!("stage {} FAILED: {}", stage.name(), e.message));
                    failure = Some(e);
                }
            }
        }
        self.manifest.save(&self.out).map_err(|e| stage_err("io", e))?;
        self.manifest.record_file(&self.out, "manifest.json").ok();
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    // -----------------------------------------------------------------
    // Stage: dataset
    // -----------------------------------------------------------------

    fn stage_dataset(&mut self) -> Result<(), RunError> {
        let cfg = &self.cfg;
        let splits = match &cfg.dataset {
            DatasetKind::Synthetic => {
                let gen = |per_class: usize, tag: u64| {
                    dataset::synthetic(&SyntheticSpec {
                        classes: cfg.classes,
                        per_class,
                        size: cfg.image_size,
                        seed: cfg.seed.wrapping_add(tag),
                    })
                };
                Splits {
                    train: gen(cfg.train_per_class, 0),
                    val: gen(cfg.val_per_class, 1),
                    test: gen(cfg.test_per_class, 2),
                }
            }
            DatasetKind::Idx { train_images, train_labels, test_images, test_labels } => {
                let full = dataset::load_idx(train_images, train_labels, cfg.classes)
                    .map_err(|e| stage_err("dataset", e))?;
                let test = dataset::load_idx(test_images, test_labels, cfg.classes)
                    .map_err(|e| stage_err("dataset", e))?;
                // Last tenth of the training file becomes validation.
                let cut = full.len() - full.len() / 10;
                Splits {
                    train: Dataset {
                        images: full.images[..cut].to_vec(),
                        labels: full.labels[..cut].to_vec(),
                        classes: full.classes,
                    },
                    val: Dataset {
                        images: full.images[cut..].to_vec(),
                        labels: full.labels[cut..].to_vec(),
                        classes: full.classes,
                    },
                    test,
                }
            }
        };
        let mut csv = String::from("split,images,classes\n");
        for (name, d) in
            [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)]
        {
            csv.push_str(&format!("{name},{},{}\n", d.len(), d.classes));
        }
        self.state.splits = Some(splits);
        self.emit("dataset_summary.csv", &csv)
    }

    // -----------------------------------------------------------------
    // Stage: models
    // -----------------------------------------------------------------

    fn build_model(&self, family: &str) -> Result<Model, RunError> {
        let cfg = &self.cfg;
        let splits = self.state.splits.as_ref().expect("dataset stage ran");
        let input = splits.train.input_spec();
        match family {
            "cnn" => Ok(Model::Cnn(Cnn::build(
                CnnConfig::new(input, cfg.classes, cfg.seed).with_width(cfg.cnn_width),
            ))),
            "vit" => {
                let vcfg = VitConfig {
                    patch: cfg.vit_patch,
                    depth: cfg.vit_depth,
                    heads: cfg.vit_heads,
                    embed: cfg.vit_embed,
                    mlp_hidden: 2 * cfg.vit_embed,
                    ..VitConfig::new(input, cfg.classes, cfg.seed)
                };
                Ok(Model::Vit(Vit::build(vcfg).map_err(|e| stage_err("models", e))?))
            }
            other => Err(stage_err("models", format!("unknown model family '{other}'"))),
        }
    }

    fn stage_models(&mut self) -> Result<(), RunError> {
        let families = self.cfg.models.clone();
        for family in families {
            let ckpt = self.out.join(format!("model_{family}.ckpt"));
            let model = if ckpt.exists() {
                self.log(&format!("loading checkpoint {}", ckpt.display()));
                load_checkpoint(&ckpt).map_err(|e| stage_err("models", e))?
            } else if self.cfg.train_enabled {
                let mut model = self.build_model(&family)?;
                let splits = self.state.splits.as_ref().expect("dataset stage ran");
                let tc = TrainConfig {
                    epochs: self.cfg.epochs,
                    batch_size: self.cfg.batch_size,
                    learning_rate: self.cfg.train_learning_rate,
                    label_smoothing: self.cfg.label_smoothing,
                    seed: self.cfg.seed,
                };
                self.log(&format!(
                    "training {family} ({} params, {} epochs)",
                    model.num_params(),
                    tc.epochs
                ));
                let report = train(
                    &mut model,
                    &splits.train.images,
                    &splits.train.labels,
                    &splits.val.images,
                    &splits.val.labels,
                    &tc,
                )
                .map_err(|e| stage_err("models", e))?;
                let mut csv = String::from("epoch,train_accuracy,val_accuracy\n");
                for (i, (tr, va)) in
                    report.train_accuracy.iter().zip(&report.val_accuracy).enumerate()
                {
                    csv.push_str(&format!("{},{tr:.6},{va:.6}\n", i + 1));
                }
                self.emit(&format!("training_{family}.csv"), &csv)?;
                save_checkpoint(&model, &ckpt).map_err(|e| stage_err("models", e))?;
                self.manifest
                    .record_file(&self.out, &format!("model_{family}.ckpt"))
                    .map_err(|e| stage_err("io", e))?;
                self.log(&format!(
                    "{family} validation accuracy {:.3}",
                    report.final_val_accuracy
                ));
                model
            } else {
                return Err(stage_err(
                    "models",
                    format!("checkpoint {} missing and training disabled", ckpt.display()),
                ));
            };
            self.state.models.push((family.clone(), model));
        }
        Ok(())
    }

    // -----------------------------------------------------------------
    // Stage: attack
    // -----------------------------------------------------------------

    /// First N test images the model classifies correctly.
    fn select_attack_set(&self, model: &Model) -> (Vec<Tensor>, Vec<usize>) {
        let splits = self.state.splits.as_ref().expect("dataset stage ran");
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (x, &y) in splits.test.images.iter().zip(&splits.test.labels) {
            if images.len() >= self.cfg.attack_images {
                break;
            }
            if let Ok(logits) = model.logits(x) {
                if freqlab_core::models::argmax(&logits) == y {
                    images.push(x.clone());
                    labels.push(y);
                }
            }
        }
        (images, labels)
    }

    fn base_attack_config(&self, lambda: Real, components: Components) -> AttackConfig {
        AttackConfig {
            lambda,
            components,
            band_regions: self.cfg.attack_band.regions(),
            learning_rate: self.cfg.attack_learning_rate,
            weight_decay: self.cfg.attack_weight_decay,
            max_iterations: self.cfg.attack_max_iterations,
            patience: self.cfg.attack_patience,
            l2_mode: self.cfg.attack_l2_mode,
            seed: self.cfg.seed,
        }
    }

    fn stage_attack(&mut self) -> Result<(), RunError> {
        let workers = worker_count(self.cfg.workers);
        let models = std::mem::take(&mut self.state.models);
        for (family, model) in &models {
            let (images, labels) = self.select_attack_set(model);
            if images.is_empty() {
                return Err(stage_err("attack", format!("{family}: no correctly-classified test image")));
            }
            self.log(&format!(
                "attacking {family} on {} images with {} workers",
                images.len(),
                workers
            ));
            self.state.attack_sets.insert(family.clone(), (images.clone(), labels.clone()));

            for &components in &self.cfg.attack_components.clone() {
                // One job per (lambda, image), canonical order.
                let jobs: Vec<(Real, usize)> = self
                    .cfg
                    .lambdas
                    .iter()
                    .flat_map(|&l| (0..images.len()).map(move |i| (l, i)))
                    .collect();
                let results: Vec<Result<AttackResult, String>> =
                    parallel_map(&jobs, workers, |_, &(lambda, i)| {
                        let cfg = self.base_attack_config(lambda, components);
                        optimize_attack(&images[i], labels[i], model, &cfg)
                            .map_err(|e| e.to_string())
                    });
                let mut rows = Vec::with_capacity(jobs.len());
                for ((lambda, i), result) in jobs.into_iter().zip(results) {
                    let result = result.map_err(|e| stage_err("attack", e))?;
                    rows.push((i, lambda, result));
                }
                self.emit_attack_tables(family, components, &rows)?;
                self.state.attack_runs.push(AttackRun {
                    model_name: family.clone(),
                    components,
                    rows,
                });
            }
        }
        self.state.models = models;
        Ok(())
    }

    fn emit_attack_tables(
        &mut self,
        family: &str,
        components: Components,
        rows: &[(usize, Real, AttackResult)],
    ) -> Result<(), RunError> {
        let comp = components.label().replace('+', "_");

        let mut csv = String::from(
            "image_index,lambda,success,iterations,original_class,adversarial_class,l2,ce,psnr,ms_ssim,mdsi\n",
        );
        for (i, lambda, r) in rows {
            csv.push_str(&format!(
                "{i},{lambda},{},{},{},{},{:.9},{:.9},{:.6},{:.6},{}\n",
                r.success as u8,
                r.iterations,
                r.original_class,
                r.adversarial_class,
                r.l2_distance,
                r.ce_loss,
                r.quality.psnr,
                r.quality.ms_ssim,
                r.quality.mdsi.map_or("nan".to_string(), |v| format!("{v:.6}")),
            ));
        }
        self.emit(&format!("attack_results_{family}_{comp}.csv"), &csv)?;

        // Per-lambda aggregates.
        let mut csv = String::from(
            "lambda,attempts,successes,asr,mean_psnr_success,mean_ms_ssim_success,mean_mdsi_success,mean_iterations\n",
        );
        for &lambda in &self.cfg.lambdas {
            let sel: Vec<&AttackResult> =
                rows.iter().filter(|(_, l, _)| *l == lambda).map(|(_, _, r)| r).collect();
            let successes: Vec<&&AttackResult> = sel.iter().filter(|r| r.success).collect();
            let mean = |f: &dyn Fn(&AttackResult) -> Real| -> Real {
                if successes.is_empty() {
                    Real::NAN
                } else {
                    successes.iter().map(|r| f(r)).sum::<Real>() / successes.len() as Real
                }
            };
            let mean_iter =
                sel.iter().map(|r| r.iterations as Real).sum::<Real>() / sel.len().max(1) as Real;
            csv.push_str(&format!(
                "{lambda},{},{},{:.6},{:.6},{:.6},{:.6},{mean_iter:.1}\n",
                sel.len(),
                successes.len(),
                successes.len() as Real / sel.len().max(1) as Real,
                mean(&|r| r.quality.psnr),
                mean(&|r| r.quality.ms_ssim),
                mean(&|r| r.quality.mdsi.unwrap_or(Real::NAN)),
            ));
        }
        self.emit(&format!("sweep_{family}_{comp}.csv"), &csv)?;

        // Binned ASR curves per quality axis.
        for axis in [QualityAxis::Psnr, QualityAxis::MsSsim, QualityAxis::Mdsi] {
            let points: Vec<(Real, bool)> = rows
                .iter()
                .filter_map(|(_, _, r)| axis.of(&r.quality).map(|q| (q, r.success)))
                .collect();
            if points.is_empty() {
                continue;
            }
            let curve = build_asr_curve(&points, self.cfg.curve_bins)
                .map_err(|e| stage_err("attack", e))?;
            let mut csv = String::from("bin_lo,bin_hi,mean_quality,asr,count\n");
            for b in &curve.bins {
                csv.push_str(&format!(
                    "{:.6},{:.6},{:.6},{:.6},{}\n",
                    b.lo, b.hi, b.mean_quality, b.asr, b.count
                ));
            }
            self.emit(&format!("asr_curve_{family}_{comp}_{}.csv", axis.label()), &csv)?;
        }
        Ok(())
    }

    // -----------------------------------------------------------------
    // Stage: baselines
    // -----------------------------------------------------------------

    fn stage_baselines(&mut self) -> Result<(), RunError> {
        if !self.cfg.baselines_enabled {
            return Ok(());
        }
        let workers = worker_count(self.cfg.workers);
        let models = std::mem::take(&mut self.state.models);
        for (family, model) in &models {
            let (images, labels) =
                self.state.attack_sets.get(family).cloned().unwrap_or_else(|| {
                    self.select_attack_set(model)
                });
            let mut csv = String::from("method,epsilon,attempts,successes,asr,mean_psnr\n");
            for method in ["fgsm", "pgd"] {
                for &eps in DEFAULT_EPSILON_GRID.iter() {
                    let advs: Vec<Result<Tensor, String>> =
                        parallel_map(&images, workers, |i, x| {
                            match method {
                                "fgsm" => fgsm(x, labels[i], model, eps),
                                _ => pgd(x, labels[i], model, eps, eps / 4.0, self.cfg.pgd_steps),
                            }
                            .map_err(|e| e.to_string())
                        });
                    let mut successes = 0usize;
                    let mut psnr_sum = 0.0;
                    for (i, adv) in advs.iter().enumerate() {
                        let adv = adv.as_ref().map_err(|e| stage_err("baselines", e))?;
                        let pred = freqlab_core::models::argmax(
                            &model.logits(adv).map_err(|e| stage_err("baselines", e))?,
                        );
                        if pred != labels[i] {
                            successes += 1;
                        }
                        psnr_sum += psnr(&images[i], adv).map_err(|e| stage_err("baselines", e))?;
                    }
                    csv.push_str(&format!(
                        "{method},{eps},{},{successes},{:.6},{:.6}\n",
                        images.len(),
                        successes as Real / images.len() as Real,
                        psnr_sum / images.len() as Real,
                    ));
                }
            }
            self.emit(&format!("baselines_{family}.csv"), &csv)?;
        }
        self.state.models = models;
        Ok(())
    }

    // -----------------------------------------------------------------
    // Stage: analysis
    // -----------------------------------------------------------------

    /// Sweep lambda whose results feed image-level diagnostics (the paper
    /// uses 5e3 for its linearity and attention studies).
    fn reference_lambda(&self) -> Real {
        self.cfg
            .lambdas
            .iter()
            .copied()
            .min_by(|a, b| {
                ((a - 5e3).abs()).partial_cmp(&(b - 5e3).abs()).expect("finite lambdas")
            })
            .unwrap_or(5e3)
    }

    fn stage_analysis(&mut self) -> Result<(), RunError> {
        if !self.cfg.analysis_enabled {
            return Ok(());
        }
        let strongest_lambda =
            self.cfg.lambdas.iter().copied().fold(Real::INFINITY, Real::min);
        let reference_lambda = self.reference_lambda();
        let partition = make_region_partition(self.cfg.image_size, self.cfg.image_size);
        let models = std::mem::take(&mut self.state.models);
        let attack_runs = std::mem::take(&mut self.state.attack_runs);

        for (family, model) in &models {
            let Some((images, labels)) = self.state.attack_sets.get(family).cloned() else {
                continue;
            };
            let n_analysis = self.cfg.analysis_images.min(images.len());

            // Frequency-region distortion histograms, averaged over the
            // successful strongest-lambda attacks.
            for run in attack_runs.iter().filter(|r| &r.model_name == family) {
                let comp = run.components.label().replace('+', "_");
                let mut acc = [0.0; NUM_REGIONS];
                let mut n = 0usize;
                for (i, lambda, r) in &run.rows {
                    if *lambda != strongest_lambda || !r.success {
                        continue;
                    }
                    match region_distortion_histogram(&images[*i], &r.attacked, &partition) {
                        Ok(h) => {
                            for (a, f) in acc.iter_mut().zip(h.fractions) {
                                *a += f;
                            }
                            n += 1;
                        }
                        Err(analysis::AnalysisError::ZeroDistortion) => {}
                        Err(e) => return Err(stage_err("analysis", e)),
                    }
                }
                if n == 0 {
                    continue;
                }
                let mut csv = String::from("region,mean_fraction\n");
                for (i, a) in acc.iter().enumerate() {
                    csv.push_str(&format!("{},{:.9}\n", i + 1, a / n as Real));
                }
                self.emit(&format!("region_hist_{family}_{comp}.csv"), &csv)?;

                // Linearity profiles along delta = X' - X at the reference
                // lambda.
                let mut csv = String::from("image_index,eps,theta\n");
                let grid = analysis::default_epsilon_grid();
                let mut emitted = false;
                for (i, lambda, r) in run.rows.iter() {
                    if *lambda != reference_lambda || *i >= n_analysis {
                        continue;
                    }
                    let delta = Tensor::new(
                        images[*i].shape().to_vec(),
                        r.attacked
                            .data()
                            .iter()
                            .zip(images[*i].data())
                            .map(|(a, b)| a - b)
                            .collect(),
                    )
                    .expect("same shape");
                    if delta.max_abs() == 0.0 {
                        continue;
                    }
                    match linearity_theta(
                        model,
                        &images[*i],
                        &delta,
                        &grid,
                        analysis::LINEARITY_DELTA_EPSILON,
                    ) {
                        Ok(profile) => {
                            for (e, t) in profile.eps.iter().zip(&profile.theta) {
                                csv.push_str(&format!("{i},{e},{t:.9}\n"));
                            }
                            emitted = true;
                        }
                        Err(analysis::AnalysisError::DegenerateShift { .. }) => {}
                        Err(e) => return Err(stage_err("analysis", e)),
                    }
                }
                if emitted {
                    self.emit(&format!("linearity_{family}_{comp}.csv"), &csv)?;
                }

                // Attention correlation between original and attacked
                // rollout maps (transformers only).
                if matches!(model, Model::Vit(_)) {
                    let mut csv = String::from("image_index,pearson_r\n");
                    let mut any = false;
                    for (i, lambda, r) in &run.rows {
                        if *lambda != reference_lambda || *i >= n_analysis || !r.success {
                            continue;
                        }
                        let before = model
                            .attention_trace(&images[*i])
                            .map_err(|e| stage_err("analysis", e))?;
                        let after = model
                            .attention_trace(&r.attacked)
                            .map_err(|e| stage_err("analysis", e))?;
                        let map_a =
                            attention_rollout(&before).map_err(|e| stage_err("analysis", e))?;
                        let map_b =
                            attention_rollout(&after).map_err(|e| stage_err("analysis", e))?;
                        match attention_correlation(&map_a, &map_b) {
                            Ok(rho) => {
                                csv.push_str(&format!("{i},{rho:.9}\n"));
                                any = true;
                            }
                            Err(analysis::AnalysisError::ConstantMap) => {}
                            Err(e) => return Err(stage_err("analysis", e)),
                        }
                    }
                    if any {
                        self.emit(&format!("attention_{family}_{comp}.csv"), &csv)?;
                    }
                }
            }

            // Magnitude/phase reduction sweep (attack-independent).
            let sub_images = &images[..n_analysis];
            let sub_labels = &labels[..n_analysis];
            let grid = analysis::default_reduction_grid();
            let mag = spectrum_reduction_sweep(
                model,
                sub_images,
                sub_labels,
                SpectrumComponent::Magnitude,
                &grid,
            )
            .map_err(|e| stage_err("analysis", e))?;
            let phase = spectrum_reduction_sweep(
                model,
                sub_images,
                sub_labels,
                SpectrumComponent::Phase,
                &grid,
            )
            .map_err(|e| stage_err("analysis", e))?;
            let mut csv = String::from("r,accuracy_magnitude_reduced,accuracy_phase_reduced\n");
            for ((r, am), (_, ap)) in mag.iter().zip(&phase) {
                csv.push_str(&format!("{r},{am:.6},{ap:.6}\n"));
            }
            self.emit(&format!("reduction_{family}.csv"), &csv)?;

            // Magnitude-phase recombination.
            match recombination_study(model, sub_images, sub_labels) {
                Ok(stats) => {
                    let mut csv = String::from("phase_pct,magnitude_pct,else_pct,pairs\n");
                    csv.push_str(&format!(
                        "{:.4},{:.4},{:.4},{}\n",
                        stats.phase_pct, stats.magnitude_pct, stats.else_pct, stats.pairs
                    ));
                    self.emit(&format!("recombination_{family}.csv"), &csv)?;
                }
                Err(analysis::AnalysisError::NoValidPairs) => {
                    self.log(&format!("{family}: recombination skipped, no distinct-label pairs"));
                }
                Err(e) => return Err(stage_err("analysis", e)),
            }
        }
        self.state.models = models;
        self.state.attack_runs = attack_runs;
        Ok(())
    }

    // -----------------------------------------------------------------
    // Stage: report
    // -----------------------------------------------------------------

    fn stage_report(&mut self) -> Result<(), RunError> {
        // Summaries come from the sweep CSVs so the report can also run
        // standalone on an existing output directory.
        let mut entries: Vec<(String, String, Vec<(Real, Real, Real)>)> = Vec::new();
        let dir = std::fs::read_dir(&self.out).map_err(|e| stage_err("report", e))?;
        let mut sweep_files: Vec<PathBuf> = dir
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .map(|n| n.starts_with("sweep_") && n.ends_with(".csv"))
                    .unwrap_or(false)
            })
            .collect();
        sweep_files.sort();
        if sweep_files.is_empty() {
            return Err(stage_err("report", "no sweep_*.csv found; run the attack stage first"));
        }
        for path in &sweep_files {
            let name = path.file_stem().unwrap().to_str().unwrap();
            let mut parts = name.splitn(3, '_');
            parts.next();
            let family = parts.next().unwrap_or("?").to_string();
            let comp = parts.next().unwrap_or("?").replace('_', "+");
            let text = std::fs::read_to_string(path).map_err(|e| stage_err("report", e))?;
            let mut rows = Vec::new();
            for line in text.lines().skip(1) {
                let cols: Vec<&str> = line.split(',').collect();
                if cols.len() < 5 {
                    continue;
                }
                let lambda: Real = cols[0].parse().unwrap_or(Real::NAN);
                let asr: Real = cols[3].parse().unwrap_or(Real::NAN);
                let mean_psnr: Real = cols[4].parse().unwrap_or(Real::NAN);
                rows.push((lambda, asr, mean_psnr));
            }
            entries.push((family, comp, rows));
        }

        let mut text = String::new();
        text.push_str("attack-strength summary (per lambda: ASR, mean PSNR of successes)\n");
        text.push_str("====================================================================\n\n");
        for (family, comp, rows) in &entries {
            text.push_str(&format!("model {family}, attack {comp}\n"));
            text.push_str("  lambda        ASR     mean PSNR (dB)\n");
            for (lambda, asr, p) in rows {
                text.push_str(&format!("  {lambda:<12} {asr:<7.3} {p:.2}\n"));
            }
            text.push('\n');
        }

        // Qualitative ordering at the strongest lambda, reported without
        // being asserted: which attack reaches the highest ASR per model,
        // and with which fidelity.
        text.push_str("strongest-attack ordering at the smallest lambda\n");
        text.push_str("------------------------------------------------\n");
        let mut by_family: BTreeMap<&str, Vec<(&str, Real, Real)>> = BTreeMap::new();
        for (family, comp, rows) in &entries {
            if let Some((_, asr, p)) = rows.first() {
                by_family.entry(family).or_default().push((comp, *asr, *p));
            }
        }
        for (family, mut list) in by_family {
            list.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.2.total_cmp(&b.2)));
            text.push_str(&format!("{family}: "));
            let desc: Vec<String> = list
                .iter()
                .map(|(c, a, p)| format!("{c} (ASR {a:.2}, PSNR {p:.1})"))
                .collect();
            text.push_str(&desc.join("  >  "));
            text.push('\n');
        }
        text.push('\n');
        text.push_str(
            "Reference context from full-scale experiments: phase perturbations tend to\n\
             dominate for transformer models while pixel perturbations dominate for\n\
             CNNs. Whether that ordering transfers to this desk-scale setup is exactly\n\
             what the table above reports; it is informative output, not a gate.\n",
        );
        self.emit("summary.txt", &text)
    }
}

/// Full pipeline: dataset, models, attack, baselines, analysis, report.
pub fn run_experiment(cfg: ExperimentConfig, out: &Path) -> Result<RunManifest, RunError> {
    let mut runner = Runner::new(cfg, out).map_err(|e| stage_err("io", e))?;
    let result = runner.run(&[
        Stage::Dataset,
        Stage::Models,
        Stage::Attack,
        Stage::Baselines,
        Stage::Analysis,
        Stage::Report,
    ]);
    result.map(|()| runner.manifest)
}

