//! Offline and online training loops and the gradient-fidelity comparison.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::randman::{Randman, RandmanSpec};
use crate::data::raster::split_train_valid;
use crate::error::{Error, Result};
use crate::exact::{bptt_gradients, Rtrl, DEFAULT_RTRL_CAP};
use crate::grad::{gradients_for_sequence, Algorithm, GradientRecord, OnlineGradient, ResetMode};
use crate::online::{OnlineLearner, OnlineOptions, OutputAccumulator, SpatialFactor};
use crate::snn::{forward_sequence, forward_step, Network, SpikeRaster, Trajectory};
use crate::train::adamax::{AdamaxParams, AdamaxState};
use crate::train::loss::{argmax, LossKind, LossSpec};
use crate::train::metrics::{cosine_similarity, CosineReport};
use crate::train::runlog::{MinibatchRecord, TrainObserver};

/// Batch index reserved for the fixed Randman validation set.
pub const VALIDATION_BATCH: u64 = 1 << 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Offline,
    Online,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnlineUpdate {
    /// One optimizer step per time-step.
    #[default]
    EveryStep,
    /// Accumulate over the example and step once at its end.
    ExampleEnd,
}

macro_rules! named_enum {
    ($ty:ty, $what:literal, $($v:path => $s:literal),+) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($v => $s),+ })
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().replace('-', "_").as_str() {
                    $($s => Ok($v),)+
                    _ => Err(Error::config(format!(concat!("unknown ", $what, " `{}`"), s))),
                }
            }
        }
    };
}

named_enum!(TrainMode, "training mode", TrainMode::Offline => "offline", TrainMode::Online => "online");
named_enum!(OnlineUpdate, "online update cadence", OnlineUpdate::EveryStep => "every_step", OnlineUpdate::ExampleEnd => "example_end");

/// Training examples and a fixed validation set.
#[derive(Debug, Clone)]
pub enum DataSource {
    /// Fresh examples for every minibatch.
    Randman {
        generator: Randman,
        validation: SpikeRaster,
    },
    /// Minibatches drawn without replacement from a fixed training split.
    Raster {
        train: SpikeRaster,
        validation: SpikeRaster,
        seed: u64,
    },
}

impl DataSource {
    pub fn randman(spec: RandmanSpec, valid_size: usize) -> Result<Self> {
        if valid_size == 0 {
            return Err(Error::config("validation size must be positive"));
        }
        let generator = Randman::new(spec)?;
        let validation = generator.sample_batch(valid_size, VALIDATION_BATCH);
        Ok(Self::Randman { generator, validation })
    }

    pub fn raster(all: &SpikeRaster, valid_fraction: f64, seed: u64) -> Result<Self> {
        let (train, validation) = split_train_valid(all, valid_fraction, seed)?;
        if train.len() == 0 || validation.len() == 0 {
            return Err(Error::config(format!(
                "split of {} examples at fraction {valid_fraction} leaves an empty side",
                all.len()
            )));
        }
        Ok(Self::Raster { train, validation, seed })
    }

    pub fn batch(&self, size: usize, index: u64) -> SpikeRaster {
        match self {
            Self::Randman { generator, .. } => generator.sample_batch(size, index),
            Self::Raster { train, seed, .. } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                rng.set_stream(index + 1);
                let picks = rand::seq::index::sample(&mut rng, train.len(), size.min(train.len()));
                train.select(&picks.into_vec())
            }
        }
    }

    pub fn validation(&self) -> &SpikeRaster {
        match self {
            Self::Randman { validation, .. } | Self::Raster { validation, .. } => validation,
        }
    }

    pub fn channels(&self) -> usize {
        self.validation().channels()
    }

    pub fn time_steps(&self) -> usize {
        self.validation().time_steps()
    }

    pub fn num_classes(&self) -> usize {
        self.validation().num_classes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub mode: TrainMode,
    pub reset: ResetMode,
    /// `None` picks the algorithm's own default.
    pub spatial_factor: Option<SpatialFactor>,
    pub rtrl_cap: usize,
    pub online_update: OnlineUpdate,
    pub loss: LossSpec,
    pub optimizer: AdamaxParams,
    pub minibatches: usize,
    pub batch_size: usize,
    /// Validate after every this many minibatches (0: only after the last).
    pub valid_every: usize,
    /// Snapshot every this many minibatches (0: never).
    pub checkpoint_every: usize,
    /// Offline only: BPTT gradients on the same minibatch, never applied.
    pub cosine_vs_bptt: bool,
    pub bptt_reset: ResetMode,
}

impl TrainConfig {
    pub fn new(algorithm: Algorithm, loss: LossSpec) -> Self {
        Self {
            algorithm,
            mode: TrainMode::Offline,
            reset: ResetMode::default(),
            spatial_factor: None,
            rtrl_cap: DEFAULT_RTRL_CAP,
            online_update: OnlineUpdate::EveryStep,
            loss,
            optimizer: AdamaxParams::default(),
            minibatches: 100,
            batch_size: 128,
            valid_every: 1,
            checkpoint_every: 0,
            cosine_vs_bptt: false,
            bptt_reset: ResetMode::default(),
        }
    }

    /// Every incompatibility is reported here, before any compute.
    pub fn validate(&self, net: &Network, data: &DataSource) -> Result<()> {
        self.optimizer.validate()?;
        if self.minibatches == 0 || self.batch_size == 0 {
            return Err(Error::config("schedule.minibatches and schedule.batch_size must be positive"));
        }
        let f = self.algorithm.is_f_variant();
        match self.mode {
            TrainMode::Online => {
                if !self.algorithm.supports_online() {
                    return Err(Error::config(format!(
                        "train.algorithm={} cannot run with train.mode=online",
                        self.algorithm
                    )));
                }
                if self.loss.kind == LossKind::SequenceCeOnSum {
                    return Err(Error::config(
                        "loss.kind=sequence_ce_on_sum has no per-step form; train.mode=online needs per_step_ce or leaky_sum_ce",
                    ));
                }
                if f && self.loss.kind != LossKind::LeakySumCe {
                    return Err(Error::config(format!(
                        "train.algorithm={} with train.mode=online needs loss.kind=leaky_sum_ce",
                        self.algorithm
                    )));
                }
                if self.cosine_vs_bptt {
                    return Err(Error::config(
                        "diagnostics.cosine_vs_bptt needs train.mode=offline",
                    ));
                }
            }
            TrainMode::Offline => {
                if f && self.loss.kind == LossKind::PerStepCe {
                    return Err(Error::config(format!(
                        "train.algorithm={} needs loss.kind=leaky_sum_ce or sequence_ce_on_sum",
                        self.algorithm
                    )));
                }
            }
        }
        Error::check_dim("model input width vs data channels", data.channels(), net.n_inputs())?;
        Error::check_dim("model output width vs classes", data.num_classes(), net.n_outputs())?;
        Error::check_dim("loss classes vs data classes", data.num_classes(), self.loss.num_classes)?;
        if self.algorithm == Algorithm::Rtrl {
            let need = crate::exact::InfluenceTensor::element_count(&net.widths());
            if need > self.rtrl_cap {
                return Err(Error::ResourceCap {
                    what: "RTRL influence tensor".into(),
                    required: need,
                    cap: self.rtrl_cap,
                });
            }
        }
        Ok(())
    }
}

/// A gradient engine chosen by algorithm name.
pub enum Engine {
    Bptt(ResetMode),
    Stream(Box<dyn OnlineGradient + Send>),
}

impl Engine {
    pub fn new(
        net: &Network,
        algorithm: Algorithm,
        reset: ResetMode,
        spatial_factor: Option<SpatialFactor>,
        output_leak: f64,
        rtrl_cap: usize,
    ) -> Result<Self> {
        Ok(match algorithm {
            Algorithm::Bptt => Engine::Bptt(reset),
            Algorithm::Rtrl => Engine::Stream(Box::new(Rtrl::new(net, reset, rtrl_cap)?)),
            _ => Engine::Stream(Box::new(OnlineLearner::new(
                net,
                algorithm,
                OnlineOptions {
                    reset,
                    spatial_factor,
                    output_leak: Some(output_leak),
                },
            )?)),
        })
    }

    pub fn algorithm(&self) -> Algorithm {
        match self {
            Engine::Bptt(_) => Algorithm::Bptt,
            Engine::Stream(e) => e.algorithm(),
        }
    }

    /// Gradient of one stored unroll. F-variants receive accumulator deltas.
    pub fn sequence_gradients(
        &mut self,
        net: &Network,
        trajectory: &Trajectory,
        outputs: &[Array1<f64>],
        label: usize,
        loss: &LossSpec,
    ) -> Result<(f64, GradientRecord)> {
        match self {
            Engine::Bptt(reset) => {
                let (l, deltas) = loss.sequence_loss(outputs, label)?;
                Ok((l, bptt_gradients(net, trajectory, &deltas, *reset)?))
            }
            Engine::Stream(e) => {
                let (l, deltas) = if e.algorithm().is_f_variant() {
                    loss.accumulator_deltas(outputs, label)?
                } else {
                    loss.sequence_loss(outputs, label)?
                };
                Ok((l, gradients_for_sequence(e.as_mut(), net, trajectory, &deltas)?))
            }
        }
    }

    /// Persistent per-example state of this engine on the given unroll.
    pub fn state_elements(&self, trajectory: &Trajectory) -> usize {
        match self {
            Engine::Bptt(_) => trajectory.stored_elements(),
            Engine::Stream(e) => e.trace_elements().iter().sum(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchGradients {
    /// Mean over examples, summed in example order.
    pub grad: GradientRecord,
    pub reference: Option<GradientRecord>,
    pub loss: f64,
    pub accuracy: f64,
    pub state_elements: usize,
}

/// Offline minibatch gradient: the mean of per-example gradients.
pub fn batch_gradients(
    net: &Network,
    batch: &SpikeRaster,
    engine: &mut Engine,
    loss: &LossSpec,
    mut reference: Option<&mut Engine>,
) -> Result<BatchGradients> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::config("empty minibatch"));
    }
    let mut grad = GradientRecord::zeros(net);
    let mut refg = reference.as_ref().map(|_| GradientRecord::zeros(net));
    let (mut total, mut correct, mut state) = (0.0, 0usize, 0);
    for i in 0..n {
        let example = batch.example(i);
        let label = batch.labels[i];
        let traj = forward_sequence(net, example.view())?;
        let outputs: Vec<Array1<f64>> = traj.outputs().cloned().collect();
        let (l, g) = engine.sequence_gradients(net, &traj, &outputs, label, loss)?;
        grad.add_assign(&g);
        if let (Some(r), Some(acc)) = (reference.as_deref_mut(), refg.as_mut()) {
            acc.add_assign(&r.sequence_gradients(net, &traj, &outputs, label, loss)?.1);
        }
        total += l;
        correct += usize::from(loss.predict(&outputs) == label);
        state = engine.state_elements(&traj);
    }
    let inv = 1.0 / n as f64;
    grad.scale(inv);
    if let Some(r) = refg.as_mut() {
        r.scale(inv);
    }
    Ok(BatchGradients {
        grad,
        reference: refg,
        loss: total * inv,
        accuracy: correct as f64 * inv,
        state_elements: state,
    })
}

/// Mean loss and accuracy over a raster.
pub fn evaluate(net: &Network, data: &SpikeRaster, loss: &LossSpec) -> Result<(f64, f64)> {
    if data.len() == 0 {
        return Err(Error::config("cannot evaluate on an empty set"));
    }
    let (mut total, mut correct) = (0.0, 0usize);
    for i in 0..data.len() {
        let example = data.example(i);
        let mut states = net.fresh_states();
        let mut outputs = Vec::with_capacity(example.nrows());
        for row in example.rows() {
            let recs = forward_step(net, row, &mut states)?;
            outputs.push(recs.into_iter().last().expect("non-empty network").spikes);
        }
        let label = data.labels[i];
        total += loss.sequence_loss(&outputs, label)?.0;
        correct += usize::from(loss.predict(&outputs) == label);
    }
    let n = data.len() as f64;
    Ok((total / n, correct as f64 / n))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub valid_loss: f64,
    pub valid_accuracy: f64,
}

fn validation_due(cfg: &TrainConfig, done: usize) -> bool {
    done == cfg.minibatches || (cfg.valid_every > 0 && done % cfg.valid_every == 0)
}

fn checkpoint_due(cfg: &TrainConfig, done: usize) -> bool {
    cfg.checkpoint_every > 0 && (done % cfg.checkpoint_every == 0 || done == cfg.minibatches)
}

/// Run the configured schedule from `net`.
pub fn train(
    net: Network,
    data: &DataSource,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate(&net, data)?;
    match cfg.mode {
        TrainMode::Offline => train_offline(net, data, cfg, observer),
        TrainMode::Online => train_online(net, data, cfg, observer),
    }
}

pub fn train_offline(
    mut net: Network,
    data: &DataSource,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate(&net, data)?;
    let leak = cfg.loss.output_leak;
    let mut engine = Engine::new(&net, cfg.algorithm, cfg.reset, cfg.spatial_factor, leak, cfg.rtrl_cap)?;
    let mut reference = cfg.cosine_vs_bptt.then_some(Engine::Bptt(cfg.bptt_reset));
    let mut opt = AdamaxState::new(&net, cfg.optimizer)?;
    let start = Instant::now();
    if cfg.checkpoint_every > 0 {
        observer.checkpoint(0, &net)?;
    }
    let mut last_valid = (f64::NAN, f64::NAN);
    for mb in 0..cfg.minibatches {
        let batch = data.batch(cfg.batch_size, mb as u64);
        let res = batch_gradients(&net, &batch, &mut engine, &cfg.loss, reference.as_mut())?;
        let cosine = res.reference.as_ref().map(|r| cosine_similarity(&res.grad, r));
        opt.step(&res.grad, &mut net)?;
        let done = mb + 1;
        let valid = if validation_due(cfg, done) {
            last_valid = evaluate(&net, data.validation(), &cfg.loss)?;
            Some(last_valid)
        } else {
            None
        };
        observer.record(&MinibatchRecord {
            minibatch: done,
            train_loss: res.loss,
            train_accuracy: res.accuracy,
            valid_loss: valid.map(|v| v.0),
            valid_accuracy: valid.map(|v| v.1),
            trace_elements: res.state_elements,
            cosine,
            seconds: start.elapsed().as_secs_f64(),
        })?;
        if checkpoint_due(cfg, done) {
            observer.checkpoint(done, &net)?;
        }
    }
    Ok(TrainOutcome {
        network: net,
        valid_loss: last_valid.0,
        valid_accuracy: last_valid.1,
    })
}

/// Per-lane state of online training.
struct Lane {
    engine: Box<dyn OnlineGradient + Send>,
    accumulator: OutputAccumulator,
}

pub fn train_online(
    mut net: Network,
    data: &DataSource,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate(&net, data)?;
    let acc_leak = match cfg.loss.kind {
        LossKind::PerStepCe => 1.0,
        _ => cfg.loss.output_leak,
    };
    let mut lanes = (0..cfg.batch_size)
        .map(|_| {
            let engine = match Engine::new(
                &net,
                cfg.algorithm,
                cfg.reset,
                cfg.spatial_factor,
                cfg.loss.output_leak,
                cfg.rtrl_cap,
            )? {
                Engine::Stream(e) => e,
                Engine::Bptt(_) => unreachable!("rejected by validation"),
            };
            Ok(Lane {
                engine,
                accumulator: OutputAccumulator::new(net.n_outputs(), acc_leak)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut opt = AdamaxState::new(&net, cfg.optimizer)?;
    let start = Instant::now();
    if cfg.checkpoint_every > 0 {
        observer.checkpoint(0, &net)?;
    }
    let mut last_valid = (f64::NAN, f64::NAN);
    let mut step_grad = GradientRecord::zeros(&net);
    for mb in 0..cfg.minibatches {
        let batch = data.batch(cfg.batch_size, mb as u64);
        let n = batch.len();
        let examples: Vec<_> = (0..n).map(|i| batch.example(i)).collect();
        let mut states: Vec<_> = (0..n).map(|_| net.fresh_states()).collect();
        for lane in &mut lanes[..n] {
            lane.engine.reset_traces();
            lane.engine.take_gradients();
            lane.accumulator.reset();
        }
        let mut total = 0.0;
        let inv = 1.0 / n as f64;
        for t in 0..batch.time_steps() {
            for (b, lane) in lanes[..n].iter_mut().enumerate() {
                let records = forward_step(&net, examples[b].row(t), &mut states[b])?;
                lane.engine.observe(&net, &records)?;
                let spikes = &records.last().expect("non-empty network").spikes;
                lane.accumulator.accumulate(spikes.view());
                let (l, delta) =
                    cfg.loss.step_loss(spikes.view(), lane.accumulator.sum.view(), batch.labels[b])?;
                total += l;
                lane.engine.accumulate(&net, delta.view())?;
            }
            let last_step = t + 1 == batch.time_steps();
            if cfg.online_update == OnlineUpdate::EveryStep || last_step {
                step_grad.fill_zero();
                for lane in &mut lanes[..n] {
                    step_grad.add_assign(&lane.engine.take_gradients());
                }
                step_grad.scale(inv);
                opt.step(&step_grad, &mut net)?;
            }
        }
        let correct = lanes[..n]
            .iter()
            .zip(&batch.labels)
            .filter(|(lane, &y)| argmax(lane.accumulator.sum.view()) == y)
            .count();
        let done = mb + 1;
        let valid = if validation_due(cfg, done) {
            last_valid = evaluate(&net, data.validation(), &cfg.loss)?;
            Some(last_valid)
        } else {
            None
        };
        observer.record(&MinibatchRecord {
            minibatch: done,
            train_loss: total * inv,
            train_accuracy: correct as f64 * inv,
            valid_loss: valid.map(|v| v.0),
            valid_accuracy: valid.map(|v| v.1),
            trace_elements: lanes[0].engine.trace_elements().iter().sum(),
            cosine: None,
            seconds: start.elapsed().as_secs_f64(),
        })?;
        if checkpoint_due(cfg, done) {
            observer.checkpoint(done, &net)?;
        }
    }
    Ok(TrainOutcome {
        network: net,
        valid_loss: last_valid.0,
        valid_accuracy: last_valid.1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    pub algorithms: Vec<Algorithm>,
    pub reset: ResetMode,
    pub bptt_reset: ResetMode,
    pub spatial_factor: Option<SpatialFactor>,
    pub rtrl_cap: usize,
    pub loss: LossSpec,
    pub optimizer: AdamaxParams,
    pub minibatches: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRecord {
    pub minibatch: usize,
    pub algorithm: Algorithm,
    pub cosine: CosineReport,
}

/// Cosine of every requested algorithm against BPTT on identical weights and
/// minibatches. The weights follow the BPTT trajectory.
pub fn compare_gradients(
    mut net: Network,
    data: &DataSource,
    cfg: &CompareConfig,
    mut on_record: impl FnMut(&CompareRecord) -> Result<()>,
) -> Result<Network> {
    if cfg.algorithms.is_empty() {
        return Err(Error::config("compare.algorithms is empty"));
    }
    if cfg.minibatches == 0 || cfg.batch_size == 0 {
        return Err(Error::config("schedule.minibatches and schedule.batch_size must be positive"));
    }
    for &a in &cfg.algorithms {
        if a.is_f_variant() && cfg.loss.kind == LossKind::PerStepCe {
            return Err(Error::config(format!(
                "compare.algorithms contains {a}, which needs loss.kind=leaky_sum_ce or sequence_ce_on_sum"
            )));
        }
    }
    Error::check_dim("model input width vs data channels", data.channels(), net.n_inputs())?;
    Error::check_dim("model output width vs classes", data.num_classes(), net.n_outputs())?;
    Error::check_dim("loss classes vs data classes", data.num_classes(), cfg.loss.num_classes)?;
    let leak = cfg.loss.output_leak;
    let mut engines = cfg
        .algorithms
        .iter()
        .map(|&a| Engine::new(&net, a, cfg.reset, cfg.spatial_factor, leak, cfg.rtrl_cap))
        .collect::<Result<Vec<_>>>()?;
    let mut bptt = Engine::Bptt(cfg.bptt_reset);
    let mut opt = AdamaxState::new(&net, cfg.optimizer)?;
    for mb in 0..cfg.minibatches {
        let batch = data.batch(cfg.batch_size, mb as u64);
        let inv = 1.0 / batch.len() as f64;
        let mut reference = GradientRecord::zeros(&net);
        let mut grads: Vec<GradientRecord> = engines.iter().map(|_| GradientRecord::zeros(&net)).collect();
        for i in 0..batch.len() {
            let traj = forward_sequence(&net, batch.example(i).view())?;
            let outputs: Vec<Array1<f64>> = traj.outputs().cloned().collect();
            let label = batch.labels[i];
            reference.add_assign(&bptt.sequence_gradients(&net, &traj, &outputs, label, &cfg.loss)?.1);
            for (e, g) in engines.iter_mut().zip(&mut grads) {
                g.add_assign(&e.sequence_gradients(&net, &traj, &outputs, label, &cfg.loss)?.1);
            }
        }
        reference.scale(inv);
        for (e, g) in engines.iter().zip(&mut grads) {
            g.scale(inv);
            on_record(&CompareRecord {
                minibatch: mb + 1,
                algorithm: e.algorithm(),
                cosine: cosine_similarity(g, &reference),
            })?;
        }
        opt.step(&reference, &mut net)?;
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::randman::Encoding;
    use crate::snn::LifParams;
    use crate::train::runlog::RunLog;

    fn data() -> DataSource {
        let spec = RandmanSpec {
            num_classes: 3,
            neurons: 6,
            time_steps: 8,
            encoding: Encoding::Time,
            seed: 5,
            ..RandmanSpec::default()
        };
        DataSource::randman(spec, 12).unwrap()
    }

    fn cfg(algorithm: Algorithm) -> TrainConfig {
        let mut c = TrainConfig::new(algorithm, LossSpec::new(LossKind::SequenceCeOnSum, 1.0, 3).unwrap());
        c.minibatches = 4;
        c.batch_size = 5;
        c.optimizer.lr = 0.01;
        c
    }

    fn net(widths: &[usize]) -> Network {
        Network::init(widths, LifParams::new(0.9, 0.5, 25.0).unwrap(), 2.0, 1).unwrap()
    }

    #[test]
    fn batch_gradient_is_mean_of_examples() {
        let n = net(&[6, 5, 3]);
        let d = data();
        let batch = d.batch(4, 0);
        let loss = LossSpec::new(LossKind::SequenceCeOnSum, 1.0, 3).unwrap();
        for algo in [Algorithm::Bptt, Algorithm::Otpe, Algorithm::ApproxOtpe, Algorithm::FOtpe] {
            let mut e = Engine::new(&n, algo, ResetMode::Surrogate, None, 1.0, DEFAULT_RTRL_CAP).unwrap();
            let res = batch_gradients(&n, &batch, &mut e, &loss, None).unwrap();
            let mut manual = GradientRecord::zeros(&n);
            for i in 0..4 {
                let single = batch.select(&[i]);
                manual.add_assign(&batch_gradients(&n, &single, &mut e, &loss, None).unwrap().grad);
            }
            manual.scale(0.25);
            assert!(res.grad.max_abs_diff(&manual) < 1e-12, "{algo}");
        }
    }

    #[test]
    fn single_layer_ostl_run_tracks_bptt() {
        let d = data();
        let mut a = RunLog::new();
        let mut b = RunLog::new();
        let oa = train(net(&[6, 3]), &d, &cfg(Algorithm::Ostl), &mut a).unwrap();
        let ob = train(net(&[6, 3]), &d, &cfg(Algorithm::Bptt), &mut b).unwrap();
        assert!(oa.network.flat_params().iter().zip(ob.network.flat_params()).all(|(x, y)| (x - y).abs() < 1e-12));
        for (x, y) in a.records.iter().zip(&b.records) {
            assert_eq!(x.valid_accuracy, y.valid_accuracy);
            assert!((x.train_loss - y.train_loss).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let n = net(&[6, 4, 3]);
        let mut c = cfg(Algorithm::Otpe);
        c.optimizer.lr = 0.0;
        let out = train(n.clone(), &data(), &c, &mut ()).unwrap();
        assert_eq!(out.network, n);
        let mut c = cfg(Algorithm::Ottt);
        c.mode = TrainMode::Online;
        c.loss.kind = LossKind::PerStepCe;
        c.optimizer.lr = 0.0;
        assert_eq!(train(n.clone(), &data(), &c, &mut ()).unwrap().network, n);
    }

    #[test]
    fn incompatible_configs_are_rejected() {
        let n = net(&[6, 4, 3]);
        let d = data();
        let mut c = cfg(Algorithm::Bptt);
        c.mode = TrainMode::Online;
        c.loss.kind = LossKind::PerStepCe;
        assert!(matches!(train(n.clone(), &d, &c, &mut ()), Err(Error::Config(_))));
        let mut c = cfg(Algorithm::FOtpe);
        c.loss.kind = LossKind::PerStepCe;
        assert!(train(n.clone(), &d, &c, &mut ()).is_err());
        let mut c = cfg(Algorithm::Otpe);
        c.mode = TrainMode::Online;
        assert!(train(n.clone(), &d, &c, &mut ()).is_err());
        let mut c = cfg(Algorithm::Rtrl);
        c.rtrl_cap = 10;
        assert!(matches!(train(n.clone(), &d, &c, &mut ()), Err(Error::ResourceCap { .. })));
        assert!(train(net(&[5, 3]), &d, &cfg(Algorithm::Otpe), &mut ()).is_err());
    }

    #[test]
    fn runs_are_deterministic() {
        let d = data();
        for mode in [TrainMode::Offline, TrainMode::Online] {
            let mut c = cfg(Algorithm::FApproxOtpe);
            c.mode = mode;
            c.loss.kind = LossKind::LeakySumCe;
            c.loss.output_leak = 0.9;
            let mut a = RunLog::new();
            let mut b = RunLog::new();
            let x = train(net(&[6, 4, 3]), &d, &c, &mut a).unwrap();
            let y = train(net(&[6, 4, 3]), &d, &c, &mut b).unwrap();
            assert_eq!(x.network, y.network);
            for (p, q) in a.records.iter().zip(&b.records) {
                assert_eq!((p.train_loss, p.valid_accuracy), (q.train_loss, q.valid_accuracy));
            }
        }
    }

    #[test]
    fn online_single_layer_ostl_matches_rtrl_step_gradients() {
        let n = net(&[6, 3]);
        let batch = data().batch(1, 2);
        let loss = LossSpec::new(LossKind::PerStepCe, 1.0, 3).unwrap();
        let mut ostl = OnlineLearner::new(&n, Algorithm::Ostl, OnlineOptions::default()).unwrap();
        let mut rtrl = Rtrl::new(&n, ResetMode::Surrogate, DEFAULT_RTRL_CAP).unwrap();
        let mut states = n.fresh_states();
        let ex = batch.example(0);
        let mut acc = Array1::zeros(3);
        for row in ex.rows() {
            let rec = forward_step(&n, row, &mut states).unwrap();
            acc += &rec[0].spikes;
            let (_, d) = loss.step_loss(rec[0].spikes.view(), acc.view(), batch.labels[0]).unwrap();
            for e in [&mut ostl as &mut dyn OnlineGradient, &mut rtrl] {
                e.observe(&n, &rec).unwrap();
                e.accumulate(&n, d.view()).unwrap();
            }
            assert!(ostl.take_gradients().max_abs_diff(&rtrl.take_gradients()) < 1e-12);
        }
    }

    #[test]
    fn compare_output_layer_is_exact_for_ostl_and_otpe() {
        let c = CompareConfig {
            algorithms: vec![Algorithm::Ostl, Algorithm::Otpe, Algorithm::FOtpe],
            reset: ResetMode::Surrogate,
            bptt_reset: ResetMode::Surrogate,
            spatial_factor: None,
            rtrl_cap: DEFAULT_RTRL_CAP,
            loss: LossSpec::new(LossKind::SequenceCeOnSum, 1.0, 3).unwrap(),
            optimizer: AdamaxParams { lr: 0.01, ..Default::default() },
            minibatches: 3,
            batch_size: 4,
        };
        let mut seen = 0;
        compare_gradients(net(&[6, 5, 4, 3]), &data(), &c, |r| {
            let out = r.cosine.per_layer.last().unwrap();
            if !out.degenerate {
                assert!((out.value - 1.0).abs() < 1e-9, "{r:?}");
            }
            seen += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, 9);
    }

    #[test]
    fn raster_batches_are_seeded_subsets() {
        let all = data().batch(30, 0);
        let d = DataSource::raster(&all, 0.1, 3).unwrap();
        assert_eq!(d.validation().len(), 3);
        let a = d.batch(8, 4);
        assert_eq!(a, d.batch(8, 4));
        assert_ne!(a, d.batch(8, 5));
        assert_eq!(d.batch(100, 0).len(), 27);
    }
}
