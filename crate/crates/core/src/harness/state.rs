//! Mapping of models and run state onto checkpoint entries.

use super::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::metrics::{parse_metrics, write_metrics, RunMetrics};
use crate::nn::{
    format_architecture, parse_architecture, BatchSampler, ConvLayer, ConvNet, FcLayer, Layer, LayerSpec, MaxPool,
    ParamGrad, Sgd, SgdConfig, Trainer,
};
use crate::spp::{EngineState, GroupState};
use crate::tensor::Tensor;

const NONE: u64 = u64::MAX;

fn layer_key(i: usize, what: &str) -> String {
    format!("model.layer.{i:03}.{what}")
}

pub fn put_model(ck: &mut Checkpoint, model: &ConvNet) {
    ck.put_text("model.architecture", format_architecture(model.specs()));
    ck.put_u64s("model.input_shape", model.input_shape().iter().map(|&d| d as u64).collect());
    for (i, layer) in model.layers().iter().enumerate() {
        let (w, b) = match layer {
            Layer::Conv(c) => {
                ck.put_u64s(layer_key(i, "mask"), c.mask().iter().map(|&m| m as u64).collect());
                (c.weights(), c.bias())
            }
            Layer::Fc(f) => (f.weights(), f.bias()),
            _ => continue,
        };
        ck.put_f64s(layer_key(i, "weight"), w.shape(), w.data().to_vec());
        ck.put_f64s(layer_key(i, "bias"), &[b.len()], b.to_vec());
    }
}

pub fn get_model(ck: &Checkpoint) -> Result<ConvNet> {
    let specs = parse_architecture(ck.text("model.architecture")?)?;
    let shape: [usize; 3] = ck
        .u64s("model.input_shape")?
        .iter()
        .map(|&d| d as usize)
        .collect::<Vec<_>>()
        .try_into()
        .map_err(|_| Error::Format("model.input_shape must have three entries".into()))?;
    let mut layers = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let params = || -> Result<(Tensor, Vec<f64>)> {
            let (ws, wd) = ck.f64s(&layer_key(i, "weight"))?;
            let (_, bd) = ck.f64s(&layer_key(i, "bias"))?;
            Ok((Tensor::from_vec(ws, wd.to_vec())?, bd.to_vec()))
        };
        layers.push(match *spec {
            LayerSpec::Conv { stride, pad, kernel, out_channels } => {
                let (w, b) = params()?;
                if w.shape().len() != 4 || w.shape()[0] != out_channels || w.shape()[2] != kernel || w.shape()[3] != kernel {
                    return Err(Error::Format(format!("layer {i}: weight shape {:?} does not match {spec}", w.shape())));
                }
                let mut conv = ConvLayer::from_parts(w, b, stride, pad)?;
                let mask: Vec<bool> = ck.u64s(&layer_key(i, "mask"))?.iter().map(|&m| m != 0).collect();
                conv.set_mask(&mask)?;
                Layer::Conv(conv)
            }
            LayerSpec::Fc { out_features } => {
                let (w, b) = params()?;
                if w.shape().first() != Some(&out_features) {
                    return Err(Error::Format(format!("layer {i}: weight shape {:?} does not match {spec}", w.shape())));
                }
                Layer::Fc(FcLayer::from_parts(w, b)?)
            }
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::MaxPool { size, stride } => Layer::MaxPool(MaxPool { size, stride }),
        });
    }
    ConvNet::from_layers(shape, specs, layers)
}

pub fn put_sgd_config(ck: &mut Checkpoint, prefix: &str, cfg: &SgdConfig) {
    ck.put_f64(format!("{prefix}.learning_rate"), cfg.learning_rate);
    ck.put_f64(format!("{prefix}.momentum"), cfg.momentum);
    ck.put_f64(format!("{prefix}.weight_decay"), cfg.weight_decay);
    ck.put_u64(format!("{prefix}.batch_size"), cfg.batch_size as u64);
}

pub fn get_sgd_config(ck: &Checkpoint, prefix: &str) -> Result<SgdConfig> {
    Ok(SgdConfig {
        learning_rate: ck.f64(&format!("{prefix}.learning_rate"))?,
        momentum: ck.f64(&format!("{prefix}.momentum"))?,
        weight_decay: ck.f64(&format!("{prefix}.weight_decay"))?,
        batch_size: ck.usize(&format!("{prefix}.batch_size"))?,
    })
}

/// Optimiser config, momentum buffers and sampler position.
pub fn put_trainer(ck: &mut Checkpoint, prefix: &str, trainer: &Trainer) {
    put_sgd_config(ck, &format!("{prefix}.sgd"), trainer.sgd.config());
    for (i, v) in trainer.sgd.velocity().iter().enumerate() {
        if let Some(v) = v {
            ck.put_f64s(format!("{prefix}.velocity.{i:03}.weight"), &[v.weights.len()], v.weights.clone());
            ck.put_f64s(format!("{prefix}.velocity.{i:03}.bias"), &[v.bias.len()], v.bias.clone());
        }
    }
    let s = &trainer.sampler;
    ck.put_u64s(
        format!("{prefix}.sampler"),
        vec![s.seed(), s.batch_size() as u64, s.epoch(), s.cursor() as u64],
    );
}

pub fn get_trainer(ck: &Checkpoint, prefix: &str, model: &ConvNet, data_len: usize) -> Result<Trainer> {
    let cfg = get_sgd_config(ck, &format!("{prefix}.sgd"))?;
    let mut sgd = Sgd::new(cfg, model)?;
    let velocity = sgd
        .velocity()
        .iter()
        .enumerate()
        .map(|(i, v)| match v {
            None => Ok(None),
            Some(_) => Ok(Some(ParamGrad {
                weights: ck.f64s(&format!("{prefix}.velocity.{i:03}.weight"))?.1.to_vec(),
                bias: ck.f64s(&format!("{prefix}.velocity.{i:03}.bias"))?.1.to_vec(),
            })),
        })
        .collect::<Result<Vec<_>>>()?;
    sgd.set_velocity(velocity)?;
    let &[seed, batch, epoch, cursor] = ck.u64s(&format!("{prefix}.sampler"))? else {
        return Err(Error::Format(format!("{prefix}.sampler must have four entries")));
    };
    let sampler = BatchSampler::resume(seed, data_len, batch as usize, epoch, cursor as usize)?;
    Ok(Trainer { sgd, sampler })
}

fn opt(v: Option<usize>) -> u64 {
    v.map_or(NONE, |v| v as u64)
}

fn unopt(v: u64) -> Option<usize> {
    (v != NONE).then_some(v as usize)
}

pub fn put_engine(ck: &mut Checkpoint, state: &EngineState) {
    ck.put_u64("engine.iteration", state.iteration as u64);
    ck.put_u64("engine.updates", state.updates as u64);
    ck.put_bytes("engine.rng.seed", state.rng_seed.to_vec());
    ck.put_u64("engine.rng.stream", state.rng_stream);
    ck.put_u64s(
        "engine.rng.word_pos",
        vec![(state.rng_word_pos >> 64) as u64, state.rng_word_pos as u64],
    );
    ck.put_u64("engine.layers", state.groups.len() as u64);
    for (l, groups) in state.groups.iter().enumerate() {
        let key = |w: &str| format!("engine.layer.{l:03}.{w}");
        ck.put_f64s(key("p"), &[groups.len()], groups.iter().map(|g| g.p).collect());
        ck.put_u64s(key("mask"), groups.iter().map(|g| g.mask as u64).collect());
        ck.put_u64s(key("pruned"), groups.iter().map(|g| g.permanently_pruned as u64).collect());
        ck.put_u64s(key("last_rank"), groups.iter().map(|g| opt(g.last_rank)).collect());
        ck.put_u64s(key("pruned_at"), state.pruned_at[l].iter().map(|&k| opt(k)).collect());
        if let Some(init) = &state.initial_ranks {
            ck.put_u64s(key("initial_rank"), init[l].iter().map(|&r| r as u64).collect());
        }
    }
}

pub fn get_engine(ck: &Checkpoint) -> Result<EngineState> {
    let layers = ck.usize("engine.layers")?;
    let mut groups = Vec::with_capacity(layers);
    let mut pruned_at = Vec::with_capacity(layers);
    let mut initial = Vec::with_capacity(layers);
    for l in 0..layers {
        let key = |w: &str| format!("engine.layer.{l:03}.{w}");
        let p = ck.f64s(&key("p"))?.1;
        let mask = ck.u64s(&key("mask"))?;
        let pruned = ck.u64s(&key("pruned"))?;
        let last = ck.u64s(&key("last_rank"))?;
        let at = ck.u64s(&key("pruned_at"))?;
        let n = p.len();
        if [mask.len(), pruned.len(), last.len(), at.len()].iter().any(|&m| m != n) {
            return Err(Error::Format(format!("engine layer {l}: group arrays differ in length")));
        }
        groups.push(
            (0..n)
                .map(|j| GroupState {
                    layer_id: l,
                    group_index: j,
                    p: p[j],
                    mask: mask[j] != 0,
                    permanently_pruned: pruned[j] != 0,
                    last_rank: unopt(last[j]),
                })
                .collect::<Vec<_>>(),
        );
        pruned_at.push(at.iter().map(|&k| unopt(k)).collect());
        if ck.contains(&key("initial_rank")) {
            initial.push(ck.u64s(&key("initial_rank"))?.iter().map(|&r| r as usize).collect());
        }
    }
    let initial_ranks = match initial.len() {
        0 => None,
        n if n == layers => Some(initial),
        _ => return Err(Error::Format("initial ranks stored for only some layers".into())),
    };
    let &[hi, lo] = ck.u64s("engine.rng.word_pos")? else {
        return Err(Error::Format("engine.rng.word_pos must have two entries".into()));
    };
    Ok(EngineState {
        groups,
        iteration: ck.usize("engine.iteration")?,
        updates: ck.usize("engine.updates")?,
        rng_seed: ck
            .bytes("engine.rng.seed")?
            .try_into()
            .map_err(|_| Error::Format("engine.rng.seed must be 32 bytes".into()))?,
        rng_stream: ck.u64("engine.rng.stream")?,
        rng_word_pos: ((hi as u128) << 64) | lo as u128,
        initial_ranks,
        pruned_at,
    })
}

/// Stores metrics rows as CSV text; the row count is the metrics cursor.
pub fn put_metrics(ck: &mut Checkpoint, prefix: &str, metrics: &RunMetrics) -> Result<()> {
    let mut buf = Vec::new();
    write_metrics(&metrics.records, &mut buf)?;
    ck.put_text(format!("{prefix}.csv"), String::from_utf8(buf).expect("csv output is UTF-8"));
    ck.put_u64(format!("{prefix}.cursor"), metrics.records.len() as u64);
    ck.put_u64s(format!("{prefix}.recovery.layer"), metrics.recovery.iter().map(|r| r.0 as u64).collect());
    let ratios: Vec<f64> = metrics.recovery.iter().map(|r| r.1).collect();
    ck.put_f64s(format!("{prefix}.recovery.ratio"), &[ratios.len()], ratios);
    Ok(())
}

pub fn get_metrics(ck: &Checkpoint, prefix: &str) -> Result<RunMetrics> {
    let records = parse_metrics(ck.text(&format!("{prefix}.csv"))?.as_bytes())?;
    if records.len() != ck.usize(&format!("{prefix}.cursor"))? {
        return Err(Error::Format("metrics cursor does not match stored rows".into()));
    }
    let layers = ck.u64s(&format!("{prefix}.recovery.layer"))?;
    let ratios = ck.f64s(&format!("{prefix}.recovery.ratio"))?.1;
    if layers.len() != ratios.len() {
        return Err(Error::Format("recovery arrays differ in length".into()));
    }
    Ok(RunMetrics {
        records,
        recovery: layers.iter().map(|&l| l as usize).zip(ratios.iter().copied()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::Phase;
    use crate::nn::Dataset;
    use crate::spp::{ScheduleParams, SppConfig, SppRun};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy() -> (ConvNet, Dataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let specs = parse_architecture("conv(3,3,1,1) relu maxpool(2,2) fc(2)").unwrap();
        let net = ConvNet::new([2, 4, 4], &specs, &mut rng).unwrap();
        let images = (0..16 * 32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels = (0..16).map(|i| (i % 2) as u8).collect();
        (net, Dataset::new([2, 4, 4], 2, images, labels).unwrap())
    }

    #[test]
    fn run_state_round_trips() {
        let (mut net, data) = toy();
        let cfg = SppConfig {
            params: ScheduleParams { interval: 2, ..ScheduleParams::default() },
            ..SppConfig::default()
        };
        let sgd = SgdConfig { batch_size: 5, ..SgdConfig::default() };
        let mut run = SppRun::new(&net, &data, cfg, sgd, 1).unwrap();
        run.run_until(&mut net, &data, Some(&data), Some(7)).unwrap();
        run.metrics.recovery = vec![(0, 0.25)];

        let mut ck = Checkpoint::new();
        put_model(&mut ck, &net);
        put_trainer(&mut ck, "prune", &run.trainer);
        put_engine(&mut ck, &run.engine.state());
        put_metrics(&mut ck, "metrics", &run.metrics).unwrap();
        let ck = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();

        let net2 = get_model(&ck).unwrap();
        assert_eq!(net2, net);
        let t = get_trainer(&ck, "prune", &net2, data.len()).unwrap();
        assert_eq!(t.sgd, run.trainer.sgd);
        assert_eq!(t.sampler, run.trainer.sampler);
        assert_eq!(get_engine(&ck).unwrap(), run.engine.state());
        let m = get_metrics(&ck, "metrics").unwrap();
        assert_eq!(m, run.metrics);
        assert!(m.records.iter().all(|r| r.phase == Phase::Prune));
    }
}
