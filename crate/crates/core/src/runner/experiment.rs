//! The comparative training protocol: build the dataset, derive contexts,
//! fit mixtures at the configured activation tap, train the preset under the
//! configured normalization choice, evaluate per epoch, and track gradient
//! variance.
//!
//! Determinism contract: given (config, seed) every run produces the same
//! record values (wall time excepted). Each randomness consumer draws from
//! its own seed stream, training is single-threaded, and reductions run in a
//! fixed order.

use crate::data::{
    assign_contexts, batch_iter, parse_idx_images, parse_idx_labels, spatial_mean_rows,
    synth_domain_dataset, synth_mixture_dataset, ContextStrategy, LabeledDataset, SuperclassMap,
};
use crate::error::{Error, Result};
use crate::gmm::{em_fit, EmOptions, GmmModel};
use crate::metrics::{compute_metrics, GradVarTracker, MetricsSummary};
use crate::net::{
    adamw_step, build_preset, load_checkpoint, save_checkpoint, softmax_cross_entropy, AcnEvalMode,
    AdamWHyper, AdamWState, Checkpoint, InputShape, Mode, Net, NormChoice, PresetSpec,
};
use crate::runner::config::{ContextStrategyConfig, DatasetConfig, ExperimentConfig};
use crate::runner::emit::{emit_results, write_atomic, MetricsRecord, Split};
use crate::tensor::{ActivationTensor, Shape};
use std::path::{Path, PathBuf};
use std::time::Instant;

pub struct SeedRun {
    pub records: Vec<MetricsRecord>,
    pub checkpoint: Checkpoint,
}

pub struct RunOutput {
    pub records: Vec<MetricsRecord>,
    pub csv_path: PathBuf,
    pub summary_path: PathBuf,
    pub checkpoint_paths: Vec<(u64, PathBuf)>,
    pub failures: Vec<(u64, Error)>,
}

/// Train/val splits plus the network (with any mixture already attached).
pub struct Prepared {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub net: Net,
    pub context_model: Option<GmmModel>,
    pub mn_model: Option<GmmModel>,
}

fn preset_spec(config: &ExperimentConfig) -> Result<PresetSpec> {
    Ok(PresetSpec {
        name: config.preset_name()?,
        widths: config.widths_or_default()?,
        norm_choice: config.norm()?,
        norm_position: config.norm_position()?,
        affine: config.norm_affine,
        force_identity: config.norm_identity,
        epsilon: config.epsilon,
    })
}

fn input_shape_of(features: &ActivationTensor) -> Result<InputShape> {
    match features.shape() {
        Shape::Nchw { c, h, w, .. } => Ok(InputShape::Image { c, h, w }),
        Shape::Ncl { c, l: 1, .. } => Ok(InputShape::Features { d: c }),
        Shape::Ncl { .. } => Err(Error::Shape(
            "dataset rows must be images or flat feature vectors".into(),
        )),
    }
}

fn load_idx_dataset(
    images: &str,
    labels: &str,
    limit: Option<usize>,
    n_classes: usize,
) -> Result<LabeledDataset> {
    let image_bytes = std::fs::read(images)?;
    let label_bytes = std::fs::read(labels)?;
    let tensor = parse_idx_images(&image_bytes)?;
    let raw_labels = parse_idx_labels(&label_bytes)?;
    if tensor.n() != raw_labels.len() {
        return Err(Error::Format(format!(
            "{} images but {} labels",
            tensor.n(),
            raw_labels.len()
        )));
    }
    let class_labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let mut ds = LabeledDataset::new(tensor, class_labels, n_classes, images.to_string())?;
    if let Some(limit) = limit {
        let take = limit.min(ds.len());
        let indices: Vec<usize> = (0..take).collect();
        ds = ds.subset(&indices)?;
    }
    Ok(ds)
}

/// Build train/val splits. Synthetic tasks split by a seeded permutation;
/// two-domain tasks hold out target-domain rows for validation; IDX sources
/// use their test file pair.
fn build_splits(config: &ExperimentConfig, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    match &config.dataset {
        DatasetConfig::Synthetic { spec } => {
            let full = synth_mixture_dataset(spec)?;
            let mut order: Vec<usize> = (0..full.len()).collect();
            use rand::seq::SliceRandom;
            let mut rng = crate::rng::stream(seed, "split", 0);
            order.shuffle(&mut rng);
            let val_count = ((full.len() as f64) * config.val_fraction).round() as usize;
            let val_count = val_count.clamp(1, full.len() - 1);
            let val = full.subset(&order[..val_count])?;
            let train = full.subset(&order[val_count..])?;
            Ok((train, val))
        }
        DatasetConfig::SyntheticDomain { spec } => {
            let full = synth_domain_dataset(spec)?;
            let target: Vec<usize> = (0..full.len()).filter(|&i| full.origin[i] == 1).collect();
            let source: Vec<usize> = (0..full.len()).filter(|&i| full.origin[i] == 0).collect();
            use rand::seq::SliceRandom;
            let mut rng = crate::rng::stream(seed, "split", 0);
            let mut target = target;
            target.shuffle(&mut rng);
            let val_count = ((target.len() as f64) * config.val_fraction).round() as usize;
            let val_count = val_count.clamp(1, target.len() - 1);
            let val = full.subset(&target[..val_count])?;
            let mut train_rows = source;
            train_rows.extend_from_slice(&target[val_count..]);
            let train = full.subset(&train_rows)?;
            Ok((train, val))
        }
        DatasetConfig::Idx {
            images,
            labels,
            test_images,
            test_labels,
            train_limit,
            test_limit,
        } => {
            // Class count spans both files.
            let peek = |path: &str| -> Result<usize> {
                let bytes = std::fs::read(path)?;
                let labels = parse_idx_labels(&bytes)?;
                Ok(labels.iter().copied().max().map_or(0, |m| m as usize + 1))
            };
            let n_classes = peek(labels)?.max(peek(test_labels)?);
            let train = load_idx_dataset(images, labels, *train_limit, n_classes)?;
            let val = load_idx_dataset(test_images, test_labels, *test_limit, n_classes)?;
            Ok((train, val))
        }
    }
}

fn standardize(train: &mut LabeledDataset, val: &mut LabeledDataset) -> Result<()> {
    let moments = train.features.channel_moments()?;
    let scale: Vec<f64> = moments
        .var
        .iter()
        .map(|v| 1.0 / (v + 1e-8).sqrt())
        .collect();
    let shift: Vec<f64> = moments.mean.iter().map(|m| -m).collect();
    train.features = train.features.elementwise_affine(&scale, &shift)?;
    val.features = val.features.elementwise_affine(&scale, &shift)?;
    Ok(())
}

/// Evenly strided row subsample (deterministic).
fn strided_rows(total: usize, cap: usize) -> Vec<usize> {
    if total <= cap {
        return (0..total).collect();
    }
    let stride = total as f64 / cap as f64;
    (0..cap)
        .map(|i| ((i as f64 * stride) as usize).min(total - 1))
        .collect()
}

/// Per-position channel-vector rows of the activation entering `layer_idx`,
/// capped at `cap` rows, plus the channel count.
fn tap_position_rows(
    net: &mut Net,
    ds: &LabeledDataset,
    layer_idx: usize,
    batch_size: usize,
    cap: usize,
) -> Result<(Vec<f64>, usize, usize)> {
    let mut rows: Vec<f64> = Vec::new();
    let mut channels = 0;
    for batch in batch_iter(ds, batch_size, 0, false)? {
        let acts = net.activation_at(&batch.x, None, layer_idx, Mode::Eval)?;
        let (n, c, l) = acts.shape().ncl();
        channels = c;
        for ni in 0..n {
            for li in 0..l {
                for ch in 0..c {
                    rows.push(acts.at(ni, ch, li));
                }
            }
        }
        if rows.len() / channels >= 2 * cap {
            break; // enough material to subsample from
        }
    }
    let total = rows.len() / channels;
    let keep = strided_rows(total, cap);
    let mut out = Vec::with_capacity(keep.len() * channels);
    for &r in &keep {
        out.extend_from_slice(&rows[r * channels..(r + 1) * channels]);
    }
    let kept = keep.len();
    Ok((out, kept, channels))
}

/// Per-sample tap features: the spatial-mean channel vector of the
/// activation entering `layer_idx`, for every row of the dataset.
fn tap_sample_features(
    net: &mut Net,
    ds: &LabeledDataset,
    layer_idx: usize,
    batch_size: usize,
) -> Result<(Vec<f64>, usize)> {
    let mut out: Vec<f64> = Vec::with_capacity(ds.len());
    let mut channels = 0;
    for batch in batch_iter(ds, batch_size, 0, false)? {
        let acts = net.activation_at(&batch.x, None, layer_idx, Mode::Eval)?;
        channels = acts.c();
        out.extend(spatial_mean_rows(&acts));
    }
    Ok((out, channels))
}

fn em_options(seed: u64, tag: &str) -> EmOptions {
    EmOptions {
        seed: crate::rng::derive_seed(seed, tag, 0),
        ..Default::default()
    }
}

/// Fit the mixture a config calls for: the context mixture when the strategy
/// is mixture-derived, otherwise the mixture-normalization slot model.
pub fn fit_gmm_for_config(config: &ExperimentConfig, seed: u64) -> Result<GmmModel> {
    let (mut train, mut val) = build_splits(config, seed)?;
    if config.standardize {
        standardize(&mut train, &mut val)?;
    }
    if let ContextStrategyConfig::Gmm {
        components, tap, ..
    } = &config.context_strategy
    {
        return fit_context_gmm(config, seed, &train, *components, tap);
    }
    if config.norm()? == NormChoice::Mn {
        let mut net = build_net(config, &train, 1, seed)?;
        return fit_mn_gmm(config, seed, &mut net, &train);
    }
    Err(Error::Config(
        "nothing to fit: set a gmm context strategy or choose mixture normalization".into(),
    ))
}

fn fit_context_gmm(
    config: &ExperimentConfig,
    seed: u64,
    train: &LabeledDataset,
    components: usize,
    tap: &str,
) -> Result<GmmModel> {
    match tap {
        "input" => {
            let d = train.feature_dim();
            let keep = strided_rows(train.len(), config.gmm_sample_rows);
            let mut rows = Vec::with_capacity(keep.len() * d);
            for &r in &keep {
                rows.extend_from_slice(train.feature_row(r));
            }
            em_fit(
                &rows,
                keep.len(),
                d,
                components,
                &em_options(seed, "em-ctx"),
            )
        }
        "norm_slot" => {
            let mut net = build_net(config, train, components, seed)?;
            let slot = config.norm_position()? - 1;
            let layer_idx = *net
                .norm_slots
                .get(slot)
                .ok_or_else(|| Error::Config("norm slot out of range".into()))?;
            let (rows, m, c) = tap_position_rows(
                &mut net,
                train,
                layer_idx,
                config.batch_size,
                config.gmm_sample_rows,
            )?;
            em_fit(&rows, m, c, components, &em_options(seed, "em-ctx"))
        }
        other => Err(Error::Config(format!("unknown gmm tap '{other}'"))),
    }
}

fn fit_mn_gmm(
    config: &ExperimentConfig,
    seed: u64,
    net: &mut Net,
    train: &LabeledDataset,
) -> Result<GmmModel> {
    let slot = config.norm_position()? - 1;
    let layer_idx = *net
        .norm_slots
        .get(slot)
        .ok_or_else(|| Error::Config("norm slot out of range".into()))?;
    let (rows, m, c) = tap_position_rows(
        net,
        train,
        layer_idx,
        config.batch_size,
        config.gmm_sample_rows,
    )?;
    em_fit(
        &rows,
        m,
        c,
        config.mn_components,
        &em_options(seed, "em-mn"),
    )
}

fn build_net(
    config: &ExperimentConfig,
    train: &LabeledDataset,
    t_contexts: usize,
    seed: u64,
) -> Result<Net> {
    let spec = preset_spec(config)?;
    let input = input_shape_of(&train.features)?;
    let mut net = build_preset(&spec, input, train.n_classes, t_contexts.max(1), seed)?;
    net.set_acn_eval_mode(match config.eval_mode.as_str() {
        "aggregate" => AcnEvalMode::Aggregate,
        _ => AcnEvalMode::PerContext,
    });
    Ok(net)
}

/// Everything a seed needs before its first step.
pub fn prepare(config: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    let (mut train, mut val) = build_splits(config, seed)?;
    if config.standardize {
        standardize(&mut train, &mut val)?;
    }

    // Context labels.
    let mut context_model = None;
    match &config.context_strategy {
        ContextStrategyConfig::Native => {}
        ContextStrategyConfig::SuperclassMap { path } => {
            let text = std::fs::read_to_string(path)?;
            let map = SuperclassMap::from_json_str(&text)?;
            train = assign_contexts(&train, ContextStrategy::SuperclassMap(&map))?;
            val = assign_contexts(&val, ContextStrategy::SuperclassMap(&map))?;
        }
        ContextStrategyConfig::DomainTag => {
            train = assign_contexts(&train, ContextStrategy::DomainTag)?;
            val = assign_contexts(&val, ContextStrategy::DomainTag)?;
        }
        ContextStrategyConfig::Gmm {
            model_path,
            components,
            tap,
        } => {
            let model = match model_path {
                Some(path) => GmmModel::from_json_str(&std::fs::read_to_string(path)?)?,
                None => fit_context_gmm(config, seed, &train, *components, tap)?,
            };
            let k = model.k();
            match tap.as_str() {
                "input" => {
                    train.context_labels =
                        crate::data::assign_contexts_by_features(&train, &model)?;
                    val.context_labels = crate::data::assign_contexts_by_features(&val, &model)?;
                }
                "norm_slot" => {
                    let mut tap_net = build_net(config, &train, k, seed)?;
                    let slot = config.norm_position()? - 1;
                    let layer_idx = *tap_net
                        .norm_slots
                        .get(slot)
                        .ok_or_else(|| Error::Config("norm slot out of range".into()))?;
                    for ds in [&mut train, &mut val] {
                        let (feats, c) =
                            tap_sample_features(&mut tap_net, ds, layer_idx, config.batch_size)?;
                        let mut labels = Vec::with_capacity(ds.len());
                        for i in 0..ds.len() {
                            labels.push(model.assign_component(&feats[i * c..(i + 1) * c])?);
                        }
                        ds.context_labels = labels;
                    }
                }
                other => return Err(Error::Config(format!("unknown gmm tap '{other}'"))),
            }
            train.t_contexts = k;
            val.t_contexts = k;
            context_model = Some(model);
        }
    }

    let mut net = build_net(config, &train, train.t_contexts, seed)?;

    // Mixture-normalization slot model.
    let mut mn_model = None;
    if config.norm()? == NormChoice::Mn {
        let model = match &config.mn_model_path {
            Some(path) => GmmModel::from_json_str(&std::fs::read_to_string(path)?)?,
            None => fit_mn_gmm(config, seed, &mut net, &train)?,
        };
        net.attach_mn_model(model.clone())?;
        mn_model = Some(model);
    }

    Ok(Prepared {
        train,
        val,
        net,
        context_model,
        mn_model,
    })
}

fn schedule_lr(config: &ExperimentConfig, epoch: usize) -> f64 {
    match config.lr_schedule.as_str() {
        "cosine" => {
            let progress = (epoch - 1) as f64 / config.epochs.max(1) as f64;
            config.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
        _ => config.lr,
    }
}

/// Evaluate one split: mean cross-entropy and confusion-matrix metrics.
pub fn eval_split(
    net: &mut Net,
    ds: &LabeledDataset,
    batch_size: usize,
) -> Result<(f64, MetricsSummary)> {
    let requires_ctx = net.requires_context();
    let mut confusion = vec![vec![0u64; ds.n_classes]; ds.n_classes];
    let mut loss_sum = 0.0;
    for batch in batch_iter(ds, batch_size, 0, false)? {
        let ctx = if requires_ctx { Some(&batch.ctx) } else { None };
        let (logits, _) = net.forward(&batch.x, ctx, Mode::Eval)?;
        let (n, classes, _) = logits.shape().ncl();
        let (loss, _) = softmax_cross_entropy(logits.data(), n, classes, &batch.labels)?;
        loss_sum += loss * n as f64;
        for i in 0..n {
            let row = &logits.data()[i * classes..(i + 1) * classes];
            let mut pred = 0;
            for c in 1..classes {
                if row[c] > row[pred] {
                    pred = c;
                }
            }
            confusion[batch.labels[i]][pred] += 1;
        }
    }
    Ok((loss_sum / ds.len() as f64, compute_metrics(&confusion)?))
}

fn train_step(
    net: &mut Net,
    batch: &crate::data::DataBatch,
    requires_ctx: bool,
    opt: &mut AdamWState,
    tracker: &mut GradVarTracker,
) -> Result<f64> {
    let ctx = if requires_ctx { Some(&batch.ctx) } else { None };
    let (logits, caches) = net.forward(&batch.x, ctx, Mode::Train)?;
    let (n, classes, _) = logits.shape().ncl();
    let (loss, grad) = softmax_cross_entropy(logits.data(), n, classes, &batch.labels)?;
    let grad_logits = ActivationTensor::new(logits.shape(), grad)?;
    net.backward(&grad_logits, &caches)?;
    let grads = net.grads_flat();
    tracker.add_step(&grads)?;
    let mut params = net.params_flat();
    adamw_step(&mut params, &grads, opt)?;
    net.set_params_flat(&params)?;
    // Accumulators are zeroed after every optimizer step.
    net.zero_grads();
    Ok(loss)
}

fn make_record(
    run_id: &str,
    seed: u64,
    epoch: usize,
    split: Split,
    loss: f64,
    metrics: &MetricsSummary,
    grad_var: Option<(f64, f64)>,
    wall_time_s: f64,
) -> MetricsRecord {
    MetricsRecord {
        run_id: run_id.to_string(),
        seed,
        epoch,
        split,
        loss,
        accuracy: metrics.accuracy,
        precision: metrics.precision,
        recall: metrics.recall,
        f1: metrics.f1,
        grad_var_max: grad_var.map(|g| g.0),
        grad_var_mean: grad_var.map(|g| g.1),
        wall_time_s,
    }
}

/// Train one seed, optionally resuming from a checkpoint written by a run
/// with the same config. Returns per-epoch records and the final checkpoint.
pub fn run_seed(
    config: &ExperimentConfig,
    seed: u64,
    resume: Option<&Checkpoint>,
) -> Result<SeedRun> {
    let run_id = config.run_id();
    let prep = prepare(config, seed)?;
    let Prepared {
        train,
        val,
        mut net,
        ..
    } = prep;
    let hyper = AdamWHyper {
        lr: config.lr,
        weight_decay: config.weight_decay,
        ..Default::default()
    };
    let mut opt = AdamWState::new(net.param_count(), hyper);
    let mut start_epoch = 0;
    if let Some(ck) = resume {
        let (restored, epoch) = load_checkpoint(&mut net, ck)?;
        opt = restored;
        start_epoch = epoch;
    }
    let requires_ctx = net.requires_context();
    let mut records = Vec::new();

    if start_epoch == 0 {
        let t0 = Instant::now();
        let (train_loss, train_metrics) = eval_split(&mut net, &train, config.batch_size)?;
        let (val_loss, val_metrics) = eval_split(&mut net, &val, config.batch_size)?;
        let wall = t0.elapsed().as_secs_f64();
        records.push(make_record(
            &run_id,
            seed,
            0,
            Split::Train,
            train_loss,
            &train_metrics,
            None,
            wall,
        ));
        records.push(make_record(
            &run_id,
            seed,
            0,
            Split::Val,
            val_loss,
            &val_metrics,
            None,
            wall,
        ));
    }

    let mut best_val_loss = f64::INFINITY;
    let mut patience_left = config.patience;
    let mut completed = start_epoch;
    for epoch in (start_epoch + 1)..=config.epochs {
        let t0 = Instant::now();
        opt.hyper.lr = schedule_lr(config, epoch);
        let mut tracker = GradVarTracker::new(net.param_count());
        let shuffle_seed = crate::rng::derive_seed(seed, "shuffle", epoch as u64);
        for batch in &batch_iter(&train, config.batch_size, shuffle_seed, true)? {
            train_step(&mut net, batch, requires_ctx, &mut opt, &mut tracker).map_err(|e| {
                log::error!("run {run_id} seed {seed} epoch {epoch}: {e}");
                e
            })?;
        }
        let grad_var = tracker.finish();
        let (train_loss, train_metrics) = eval_split(&mut net, &train, config.batch_size)?;
        let (val_loss, val_metrics) = eval_split(&mut net, &val, config.batch_size)?;
        let wall = t0.elapsed().as_secs_f64();
        records.push(make_record(
            &run_id,
            seed,
            epoch,
            Split::Train,
            train_loss,
            &train_metrics,
            grad_var,
            wall,
        ));
        records.push(make_record(
            &run_id,
            seed,
            epoch,
            Split::Val,
            val_loss,
            &val_metrics,
            None,
            wall,
        ));
        completed = epoch;

        if config.early_stopping {
            if val_loss < best_val_loss {
                best_val_loss = val_loss;
                patience_left = config.patience;
            } else {
                patience_left = patience_left.saturating_sub(1);
                if patience_left == 0 {
                    log::info!("run {run_id} seed {seed}: early stop after epoch {epoch}");
                    break;
                }
            }
        }
    }

    let checkpoint = save_checkpoint(&net, &opt, completed);
    Ok(SeedRun {
        records,
        checkpoint,
    })
}

/// Run every seed (a failed seed does not abort its siblings), write the CSV
/// and summary atomically, and write one checkpoint per seed.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<RunOutput> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let run_id = config.run_id();
    let partial_path = out_dir.join(format!("metrics_{run_id}.csv.partial"));
    let mut partial = String::from(crate::runner::emit::CSV_HEADER);
    partial.push('\n');
    write_atomic(&partial_path, partial.as_bytes())?;

    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut checkpoint_paths = Vec::new();
    for &seed in &config.seeds {
        match run_seed(config, seed, None) {
            Ok(seed_run) => {
                for r in &seed_run.records {
                    partial.push_str(&r.to_csv_row());
                    partial.push('\n');
                }
                write_atomic(&partial_path, partial.as_bytes())?;
                let ck_path = out_dir.join(format!("checkpoint_{run_id}_seed{seed}.json"));
                crate::net::checkpoint::write_checkpoint_file(&seed_run.checkpoint, &ck_path)?;
                checkpoint_paths.push((seed, ck_path));
                records.extend(seed_run.records);
            }
            Err(e) => {
                log::error!("run {run_id} seed {seed} failed: {e}");
                failures.push((seed, e));
            }
        }
    }
    let (csv_path, summary_path) = emit_results(&records, out_dir, config)?;
    let _ = std::fs::remove_file(&partial_path);
    Ok(RunOutput {
        records,
        csv_path,
        summary_path,
        checkpoint_paths,
        failures,
    })
}

/// Rebuild the net for (config, seed), load a checkpoint, evaluate the
/// validation split.
pub fn evaluate_checkpoint(
    config: &ExperimentConfig,
    seed: u64,
    checkpoint: &Checkpoint,
) -> Result<(f64, MetricsSummary)> {
    let prep = prepare(config, seed)?;
    let Prepared { val, mut net, .. } = prep;
    load_checkpoint(&mut net, checkpoint)?;
    eval_split(&mut net, &val, config.batch_size)
}
