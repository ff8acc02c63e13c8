use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AnchorSet, DetectorConfig, RawPrediction};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::tensor::{Activation, ConvSpec, Fill, NodeId, ParamStore, Tape, Tensor};

/// Objectness and class biases start here so initial scores sit near 0.01.
const PRIOR_BIAS: f64 = -4.6;

struct Init<'a> {
    params: &'a mut ParamStore,
    seed: u64,
    counter: u64,
}

impl Init<'_> {
    fn next_seed(&mut self) -> u64 {
        self.counter += 1;
        self.seed ^ self.counter.wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }

    fn conv(&mut self, name: &str, cout: usize, cin_per_group: usize, k: usize, gain: f64) -> Result<()> {
        let fan_in = (cin_per_group * k * k) as f64;
        let seed = self.next_seed();
        let std = gain * (2.0 / fan_in).sqrt();
        self.params.insert(
            format!("{name}.w"),
            Tensor::filled(&[cout, cin_per_group, k, k], Fill::Normal { std, seed })?,
        );
        self.params.insert(format!("{name}.b"), Tensor::zeros(&[cout])?);
        Ok(())
    }
}

/// Seeded He-normal initialisation of every detector parameter.
pub fn init_params(cfg: &DetectorConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let w = &cfg.widths;
    let mut params = ParamStore::new();
    let mut init = Init {
        params: &mut params,
        seed,
        counter: 0,
    };
    init.conv("stem", w.stem, 3, 3, 1.0)?;
    init.conv("dw1.depth", w.stem, 1, 3, 1.0)?;
    init.conv("dw1.point", w.stage8, w.stem, 1, 1.0)?;
    init.conv("dw2.depth", w.stage8, 1, 3, 1.0)?;
    init.conv("dw2.point", w.stage8, w.stage8, 1, 1.0)?;
    init.conv("res8.a", w.stage8, w.stage8, 3, 1.0)?;
    init.conv("res8.b", w.stage8, w.stage8, 3, 0.1)?;
    init.conv("down", w.stage16, w.stage8, 3, 1.0)?;
    init.conv("res16.a", w.stage16, w.stage16, 3, 1.0)?;
    init.conv("res16.b", w.stage16, w.stage16, 3, 0.1)?;
    init.conv("lateral", w.stage8, w.stage16, 1, 1.0)?;
    let head_in = [w.stage8, w.stage16];
    for (l, &cin) in head_in.iter().enumerate() {
        init.conv(&format!("head{l}.hidden"), w.head, cin, 3, 1.0)?;
        let name = format!("head{l}.out");
        let seed = init.next_seed();
        init.params.insert(
            format!("{name}.w"),
            Tensor::filled(&[cfg.head_channels(), w.head, 1, 1], Fill::Normal { std: 0.01, seed })?,
        );
        let mut bias = Tensor::zeros(&[cfg.head_channels()])?;
        for a in 0..cfg.anchors_per_scale {
            let base = a * cfg.per_anchor() + 4 * cfg.dfl_bins;
            for ch in base..base + 1 + cfg.num_classes {
                bias.data_mut()[ch] = PRIOR_BIAS;
            }
        }
        init.params.insert(format!("{name}.b"), bias);
    }
    Ok(params)
}

fn id(ids: &BTreeMap<String, NodeId>, name: &str) -> Result<NodeId> {
    ids.get(name)
        .copied()
        .ok_or_else(|| Error::Contract(format!("missing detector parameter {name}")))
}

fn conv(
    tape: &mut Tape,
    ids: &BTreeMap<String, NodeId>,
    name: &str,
    x: NodeId,
    spec: ConvSpec,
    act: bool,
) -> Result<NodeId> {
    let y = tape.conv2d(x, id(ids, &format!("{name}.w"))?, spec)?;
    let y = tape.add_bias(y, id(ids, &format!("{name}.b"))?)?;
    if act {
        tape.activation(y, Activation::Silu)
    } else {
        Ok(y)
    }
}

fn depthwise_separable(
    tape: &mut Tape,
    ids: &BTreeMap<String, NodeId>,
    name: &str,
    x: NodeId,
) -> Result<NodeId> {
    let channels = tape.value(x).shape()[1];
    let y = conv(tape, ids, &format!("{name}.depth"), x, ConvSpec::grouped(2, 1, channels), true)?;
    conv(tape, ids, &format!("{name}.point"), y, ConvSpec::new(1, 0), true)
}

fn residual(tape: &mut Tape, ids: &BTreeMap<String, NodeId>, name: &str, x: NodeId) -> Result<NodeId> {
    let y = conv(tape, ids, &format!("{name}.a"), x, ConvSpec::new(1, 1), true)?;
    let y = conv(tape, ids, &format!("{name}.b"), y, ConvSpec::new(1, 1), false)?;
    let y = tape.add(x, y)?;
    tape.activation(y, Activation::Silu)
}

/// Records the detector on `tape` and returns one head node per level.
///
/// stem (s2) -> two depthwise-separable blocks (s2 each) -> residual block
/// at stride 8 -> s2 conv -> residual block at stride 16; the stride-16
/// map is projected, nearest-upsampled and added to the stride-8 map before
/// the stride-8 head.
pub fn detector_forward(
    tape: &mut Tape,
    ids: &BTreeMap<String, NodeId>,
    x: NodeId,
    cfg: &DetectorConfig,
) -> Result<Vec<NodeId>> {
    let s = tape.value(x).shape().to_vec();
    if s.len() != 4 || s[1] != 3 || s[2] != cfg.input_size || s[3] != cfg.input_size {
        return Err(Error::Shape(format!(
            "detector expects [B, 3, {n}, {n}], got {s:?}",
            n = cfg.input_size
        )));
    }
    let y = conv(tape, ids, "stem", x, ConvSpec::new(2, 1), true)?;
    let y = depthwise_separable(tape, ids, "dw1", y)?;
    let y = depthwise_separable(tape, ids, "dw2", y)?;
    let p8 = residual(tape, ids, "res8", y)?;
    let y = conv(tape, ids, "down", p8, ConvSpec::new(2, 1), true)?;
    let p16 = residual(tape, ids, "res16", y)?;

    let lat = conv(tape, ids, "lateral", p16, ConvSpec::new(1, 0), false)?;
    let up = tape.upsample_nearest(lat, 2)?;
    let fused8 = tape.add(p8, up)?;

    let mut heads = Vec::with_capacity(2);
    for (l, feat) in [fused8, p16].into_iter().enumerate() {
        let h = conv(tape, ids, &format!("head{l}.hidden"), feat, ConvSpec::new(1, 1), true)?;
        heads.push(conv(tape, ids, &format!("head{l}.out"), h, ConvSpec::new(1, 0), false)?);
    }
    Ok(heads)
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    config: DetectorConfig,
    anchors: AnchorSet,
}

/// Trained detector: architecture config, anchor priors and weights.
#[derive(Clone, Debug)]
pub struct Detector {
    pub config: DetectorConfig,
    pub anchors: AnchorSet,
    pub params: ParamStore,
}

impl Detector {
    pub fn new(config: DetectorConfig, anchors: AnchorSet, seed: u64) -> Result<Self> {
        anchors.validate()?;
        let params = init_params(&config, seed)?;
        Ok(Detector {
            config,
            anchors,
            params,
        })
    }

    /// Inference on a normalised `[B, 3, H, W]` batch.
    pub fn predict(&self, images: &Tensor) -> Result<RawPrediction> {
        let mut tape = Tape::new();
        let ids = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
            .collect();
        let x = tape.constant(images.clone());
        let heads = detector_forward(&mut tape, &ids, x, &self.config)?;
        Ok(RawPrediction {
            levels: heads.into_iter().map(|h| tape.value(h).clone()).collect(),
        })
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        path.with_extension("json")
    }

    /// Writes weights to `path` and config plus anchors to the JSON sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.params)?;
        let side = Self::sidecar_path(path);
        let json = serde_json::to_string_pretty(&Sidecar {
            config: self.config.clone(),
            anchors: self.anchors.clone(),
        })?;
        std::fs::write(&side, json).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = Self::sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let Sidecar { config, anchors } = serde_json::from_str(&text)?;
        config.validate()?;
        anchors.validate()?;
        let params = checkpoint::load(path)?;
        let fresh = init_params(&config, 0)?;
        for (name, t) in fresh.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: checkpoint shape {:?}, config expects {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(Detector {
            config,
            anchors,
            params,
        })
    }
}
