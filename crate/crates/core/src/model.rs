//! Parameter registry, initialization, and tape binding.
//!
//! Every network in the pipeline draws its weights from one flat
//! [`ParamSet`] keyed by dotted names (`ext.c1.w`, `codec.c3.b`, ...).
//! A [`Binder`] loads parameters onto a tape on first use, caches the
//! tensor ids so shared layers are loaded once, and marks tensors
//! trainable only when their name falls under one of the requested
//! prefixes. Freezing a subnet is therefore purely a naming decision,
//! and `collect_grads` afterwards returns exactly the trainable subset.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{GradMap, Param, ParamSet, Tape, TensorId};
use crate::error::{Error, Result};
use crate::geom::fm;

/// Channels in the pillar pseudo-image.
pub const EMBED_C: usize = 16;
/// Channels in an intermediate BEV feature map.
pub const FEAT_C: usize = 32;
/// Spatial side of a feature map (the 72-cell grid after one stride-2).
pub const FEAT_HW: usize = 36;
/// Head output channels: objectness + 3 center offsets + 3 log sizes +
/// yaw sine and cosine.
pub const HEAD_C: usize = 9;
/// Spatial side of the compressed map (two more stride-2 stages).
pub const COMP_HW: usize = 9;

/// Bottleneck width of the transmitted representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecWidth {
    Narrow,
    Wide,
}

impl CodecWidth {
    pub fn channels(self) -> usize {
        match self {
            CodecWidth::Narrow => 4,
            CodecWidth::Wide => 8,
        }
    }
}

/// Model hyperparameters (everything else is fixed by the constants above).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub codec: CodecWidth,
}

enum Init {
    /// He normal over fan-in, for conv/linear feeding a relu.
    He,
    /// Xavier-ish normal for linear output layers.
    Out,
    Zero,
}

fn param_specs(spec: &ModelSpec) -> Vec<(String, Vec<usize>, Init)> {
    fn push_conv(
        v: &mut Vec<(String, Vec<usize>, Init)>,
        name: &str,
        co: usize,
        ci: usize,
        k: usize,
        init: Init,
    ) {
        v.push((format!("{name}.w"), vec![co, ci, k, k], init));
        v.push((format!("{name}.b"), vec![co], Init::Zero));
    }
    let cz = spec.codec.channels();
    let mut v: Vec<(String, Vec<usize>, Init)> = Vec::new();
    // Pillar embed.
    v.push(("embed.w".to_string(), vec![EMBED_C, crate::pillars::POINT_FEAT_DIM], Init::He));
    v.push(("embed.b".to_string(), vec![EMBED_C], Init::Zero));
    // Shared BEV extractor.
    push_conv(&mut v, "ext.c1", 24, EMBED_C, 3, Init::He);
    push_conv(&mut v, "ext.c2", 24, 24, 3, Init::He);
    push_conv(&mut v, "ext.c3", 24, 24, 3, Init::He);
    push_conv(&mut v, "ext.c4", FEAT_C, 24, 3, Init::He);
    push_conv(&mut v, "ext.lat", FEAT_C, 24, 1, Init::He);
    // Roadside derivative generator (input: two stacked pseudo-images).
    // Output stages start at zero: an untrained generator predicts no motion,
    // and the cosine objective never rewards magnitude it did not ask for.
    push_conv(&mut v, "igen.c1", 24, 2 * EMBED_C, 3, Init::He);
    push_conv(&mut v, "igen.c2", 24, 24, 3, Init::He);
    push_conv(&mut v, "igen.c3", 24, 24, 3, Init::He);
    push_conv(&mut v, "igen.c4", FEAT_C, 24, 3, Init::Zero);
    push_conv(&mut v, "igen.lat", FEAT_C, 24, 1, Init::Zero);
    // Receiver-side generator (input: two stacked feature maps).
    push_conv(&mut v, "vgen.c1", 24, 2 * FEAT_C, 1, Init::He);
    push_conv(&mut v, "vgen.c2", 24, 24, 3, Init::He);
    push_conv(&mut v, "vgen.c3", 24, 24, 3, Init::He);
    push_conv(&mut v, "vgen.c4", FEAT_C, 24, 3, Init::Zero);
    // Feature codec: 32@36² → cz@9², linear final stage (signed values).
    push_conv(&mut v, "codec.c1", 16, FEAT_C, 3, Init::He);
    push_conv(&mut v, "codec.c2", 8, 16, 3, Init::He);
    push_conv(&mut v, "codec.c3", cz, 8, 1, Init::Out);
    // Decoder: deconv weights use the transposed [ci, co, kh, kw] layout.
    v.push(("dec.d1.w".to_string(), vec![cz, 16, 4, 4], Init::He));
    v.push(("dec.d1.b".to_string(), vec![16], Init::Zero));
    v.push(("dec.d2.w".to_string(), vec![16, FEAT_C, 4, 4], Init::He));
    v.push(("dec.d2.b".to_string(), vec![FEAT_C], Init::Zero));
    push_conv(&mut v, "dec.d3", FEAT_C, FEAT_C, 1, Init::Out);
    // Fusion and detection head.
    push_conv(&mut v, "fuse.c1", FEAT_C, 2 * FEAT_C, 3, Init::He);
    push_conv(&mut v, "head.c1", HEAD_C, FEAT_C, 1, Init::Out);
    v
}

/// Standard normal via Box-Muller, driven by the deterministic stream.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    fm::sqrt(-2.0 * fm::ln(u1)) * fm::cos(std::f64::consts::TAU * u2)
}

/// Builds a freshly initialized parameter set. Same seed, same bits.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for (name, shape, init) in param_specs(spec) {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zero => vec![0.0; n],
            Init::He | Init::Out => {
                // fan_in: all dims past the output-channel axis, except for
                // deconv weights where the output axis comes second.
                let fan_in: usize = if name.starts_with("dec.d1") || name.starts_with("dec.d2") {
                    shape[0] * shape[2] * shape[3]
                } else {
                    shape[1..].iter().product()
                };
                let std = match init {
                    Init::He => fm::sqrt(2.0 / fan_in as f64),
                    _ => fm::sqrt(1.0 / fan_in as f64),
                };
                (0..n).map(|_| (normal(&mut rng) * std) as f32).collect()
            }
        };
        params.insert(name, Param::new(data, shape));
    }
    // Start the objectness logit pessimistic so early training does not
    // drown in false positives.
    params.get_mut("head.c1.b").expect("head bias exists").data[0] = -2.5;
    params
}

/// Reads the bottleneck width back off a parameter set.
pub fn infer_codec_width(params: &ParamSet) -> Result<CodecWidth> {
    let w = params.get("codec.c3.w")?;
    match w.shape.first() {
        Some(4) => Ok(CodecWidth::Narrow),
        Some(8) => Ok(CodecWidth::Wide),
        other => Err(Error::config(format!("unrecognized codec width {other:?}"))),
    }
}

/// Loads parameters onto a tape on demand, once each, marking only the
/// requested prefixes as trainable.
pub struct Binder<'a> {
    params: &'a ParamSet,
    trainable: Vec<String>,
    cache: BTreeMap<String, TensorId>,
}

impl<'a> Binder<'a> {
    pub fn new(params: &'a ParamSet, trainable_prefixes: &[&str]) -> Self {
        Binder {
            params,
            trainable: trainable_prefixes.iter().map(|s| s.to_string()).collect(),
            cache: BTreeMap::new(),
        }
    }

    /// Everything frozen: inference.
    pub fn frozen(params: &'a ParamSet) -> Self {
        Binder::new(params, &[])
    }

    pub fn get(&mut self, tape: &mut Tape, name: &str) -> Result<TensorId> {
        if let Some(&id) = self.cache.get(name) {
            return Ok(id);
        }
        let p = self.params.get(name)?;
        let rg = self.trainable.iter().any(|pre| name.starts_with(pre.as_str()));
        let id = tape.load_param(p, rg);
        self.cache.insert(name.to_string(), id);
        Ok(id)
    }

    /// Gradients of every trainable parameter the tape touched.
    pub fn collect_grads(&self, tape: &Tape) -> GradMap {
        let mut out = GradMap::new();
        for (name, &id) in &self.cache {
            if let Some(g) = tape.grad(id) {
                out.insert(name.clone(), g.to_vec());
            }
        }
        out
    }
}

/// Conv layer with optional relu; names follow `<prefix>.w` / `<prefix>.b`.
pub fn conv_layer(
    tape: &mut Tape,
    binder: &mut Binder,
    x: TensorId,
    prefix: &str,
    stride: usize,
    pad: usize,
    relu: bool,
) -> Result<TensorId> {
    let w = binder.get(tape, &format!("{prefix}.w"))?;
    let b = binder.get(tape, &format!("{prefix}.b"))?;
    let y = tape.conv2d(x, w, b, stride, pad)?;
    if relu {
        tape.relu(y)
    } else {
        Ok(y)
    }
}

pub fn deconv_layer(
    tape: &mut Tape,
    binder: &mut Binder,
    x: TensorId,
    prefix: &str,
    stride: usize,
    pad: usize,
    relu: bool,
) -> Result<TensorId> {
    let w = binder.get(tape, &format!("{prefix}.w"))?;
    let b = binder.get(tape, &format!("{prefix}.b"))?;
    let y = tape.deconv2d(x, w, b, stride, pad)?;
    if relu {
        tape.relu(y)
    } else {
        Ok(y)
    }
}
