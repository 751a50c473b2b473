//! Mapping between models, quantized models, calibration sets and named
//! checkpoint tensors.
//!
//! Every file carries a `kind` byte string (`model`, `quantized` or
//! `calibration`). Models store `arch` as
//! `[data_dim, width, n_blocks, emb_dim, freq_base, skip_from, skip_to]`
//! (`-1` for no skip link) followed by `<layer>.weight` and `<layer>.bias`.
//! Quantized models add `qconfig` (the config text) and, per layer and side
//! (`wq` weights, `aq` inputs), `<side>.<layer>.state` =
//! `[tag, bits, cmin, cmax, zero]` with tag 0 bypass, 1 uninitialized,
//! 2 nearest, 3 soft rounding, 4 hard rounding; plus `<side>.<layer>.scale`
//! and, for tags 3 and 4, `<side>.<layer>.v` or `<side>.<layer>.up`.

use std::path::Path;

use super::checkpoint::{find, load_checkpoint, save_checkpoint, NamedTensor};
use crate::calib::{CalibMeta, CalibrationSet};
use crate::error::{CheckpointError, Error, Result};
use crate::netcore::{Affine, Arch, NoisePredictor, Tensor};
use crate::quant::{QuantConfig, QuantizedModel, QuantizerParams, Rounding, Slot};

fn malformed(msg: impl Into<String>) -> Error {
    Error::Checkpoint(CheckpointError::Malformed(msg.into()))
}

fn kind_of(tensors: &[NamedTensor]) -> Result<String> {
    let k = find(tensors, "kind")?.as_bytes()?;
    String::from_utf8(k.to_vec()).map_err(|_| malformed("kind is not UTF-8"))
}

fn expect_kind(tensors: &[NamedTensor], want: &str) -> Result<()> {
    let got = kind_of(tensors)?;
    if got != want {
        return Err(malformed(format!(
            "expected a {want} checkpoint, found {got}"
        )));
    }
    Ok(())
}

fn as_usize(v: f32, what: &str) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v < 1e9 {
        Ok(v as usize)
    } else {
        Err(malformed(format!(
            "{what} must be a non-negative integer, got {v}"
        )))
    }
}

fn model_tensors(model: &NoisePredictor<f32>) -> Vec<NamedTensor> {
    let a = model.arch();
    let (sf, st) = a.skip.map_or((-1.0, -1.0), |(f, t)| (f as f32, t as f32));
    let mut out = vec![NamedTensor::scalars(
        "arch",
        vec![
            a.data_dim as f32,
            a.width as f32,
            a.n_blocks as f32,
            a.emb_dim as f32,
            a.freq_base as f32,
            sf,
            st,
        ],
    )];
    for (spec, p) in model.layers().iter().zip(model.params()) {
        out.push(NamedTensor::f32(format!("{}.weight", spec.name), &p.weight));
        out.push(NamedTensor::f32(format!("{}.bias", spec.name), &p.bias));
    }
    out
}

fn model_from(tensors: &[NamedTensor]) -> Result<NoisePredictor<f32>> {
    let a = find(tensors, "arch")?.as_f32()?;
    if a.len() != 7 {
        return Err(malformed("arch must hold 7 values"));
    }
    let skip = if a[5] < 0.0 {
        None
    } else {
        Some((as_usize(a[5], "skip_from")?, as_usize(a[6], "skip_to")?))
    };
    let arch = Arch {
        data_dim: as_usize(a[0], "data_dim")?,
        width: as_usize(a[1], "width")?,
        n_blocks: as_usize(a[2], "n_blocks")?,
        emb_dim: as_usize(a[3], "emb_dim")?,
        freq_base: a[4] as f64,
        skip,
    };
    let specs = crate::netcore::model::layer_specs(&arch);
    let params = specs
        .iter()
        .map(|s| {
            Ok(Affine {
                weight: find(tensors, &format!("{}.weight", s.name))?.to_tensor()?,
                bias: find(tensors, &format!("{}.bias", s.name))?.to_tensor()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    NoisePredictor::from_params(arch, params)
}

pub fn model_to_tensors(model: &NoisePredictor<f32>) -> Vec<NamedTensor> {
    let mut out = vec![NamedTensor::bytes("kind", b"model".to_vec())];
    out.extend(model_tensors(model));
    out
}

pub fn model_from_tensors(tensors: &[NamedTensor]) -> Result<NoisePredictor<f32>> {
    expect_kind(tensors, "model")?;
    model_from(tensors)
}

fn slot_tensors(prefix: &str, slot: &Slot, out: &mut Vec<NamedTensor>) {
    let state = |tag: f32, p: Option<&QuantizerParams>, bits: u32| {
        let (cmin, cmax, z) = p.map_or((0, 0, 0), |p| (p.cmin, p.cmax, p.zero_offset));
        NamedTensor::scalars(
            format!("{prefix}.state"),
            vec![tag, bits as f32, cmin as f32, cmax as f32, z as f32],
        )
    };
    match slot {
        Slot::Bypass => out.push(state(0.0, None, 0)),
        Slot::Uninit { bits } => out.push(state(1.0, None, *bits)),
        Slot::Ready(p) => {
            let tag = match p.rounding {
                Rounding::Nearest => 2.0,
                Rounding::AdaRound { .. } => 3.0,
                Rounding::Fixed { .. } => 4.0,
            };
            out.push(state(tag, Some(p), p.bits));
            out.push(NamedTensor::scalars(
                format!("{prefix}.scale"),
                p.scale.clone(),
            ));
            match &p.rounding {
                Rounding::Nearest => {}
                Rounding::AdaRound { v } => out.push(NamedTensor::f32(format!("{prefix}.v"), v)),
                Rounding::Fixed { up } => out.push(NamedTensor::scalars(
                    format!("{prefix}.up"),
                    up.iter().map(|&u| if u { 1.0 } else { 0.0 }).collect(),
                )),
            }
        }
    }
}

fn slot_from(prefix: &str, tensors: &[NamedTensor]) -> Result<Slot> {
    let s = find(tensors, &format!("{prefix}.state"))?.as_f32()?;
    if s.len() != 5 {
        return Err(malformed(format!("{prefix}.state must hold 5 values")));
    }
    let bits = as_usize(s[1], "bits")? as u32;
    let tag = as_usize(s[0], "tag")?;
    let rounding = match tag {
        0 => return Ok(Slot::Bypass),
        1 => return Ok(Slot::Uninit { bits }),
        2 => Rounding::Nearest,
        3 => Rounding::AdaRound {
            v: find(tensors, &format!("{prefix}.v"))?.to_tensor()?,
        },
        4 => Rounding::Fixed {
            up: find(tensors, &format!("{prefix}.up"))?
                .as_f32()?
                .iter()
                .map(|&u| u != 0.0)
                .collect(),
        },
        t => return Err(malformed(format!("{prefix}: unknown quantizer tag {t}"))),
    };
    let p = QuantizerParams {
        bits,
        scale: find(tensors, &format!("{prefix}.scale"))?
            .as_f32()?
            .to_vec(),
        cmin: s[2] as i32,
        cmax: s[3] as i32,
        zero_offset: s[4] as i32,
        rounding,
    };
    p.validate()?;
    Ok(Slot::Ready(p))
}

pub fn quantized_to_tensors(qm: &QuantizedModel) -> Vec<NamedTensor> {
    let mut out = vec![NamedTensor::bytes("kind", b"quantized".to_vec())];
    out.extend(model_tensors(qm.base()));
    out.push(NamedTensor::bytes(
        "qconfig",
        qm.config().render().into_bytes(),
    ));
    for (i, spec) in qm.base().layers().iter().enumerate() {
        slot_tensors(&format!("wq.{}", spec.name), qm.weight_slot(i), &mut out);
        slot_tensors(&format!("aq.{}", spec.name), qm.act_slot(i), &mut out);
    }
    out
}

pub fn quantized_from_tensors(tensors: &[NamedTensor]) -> Result<QuantizedModel> {
    expect_kind(tensors, "quantized")?;
    let base = model_from(tensors)?;
    let text = String::from_utf8(find(tensors, "qconfig")?.as_bytes()?.to_vec())
        .map_err(|_| malformed("qconfig is not UTF-8"))?;
    let config = QuantConfig::parse(&text)?;
    let mut w = Vec::new();
    let mut a = Vec::new();
    for spec in base.layers() {
        w.push(slot_from(&format!("wq.{}", spec.name), tensors)?);
        a.push(slot_from(&format!("aq.{}", spec.name), tensors)?);
    }
    QuantizedModel::from_parts(base, config, w, a)
}

pub fn calibration_to_tensors(set: &CalibrationSet) -> Vec<NamedTensor> {
    let m = &set.meta;
    vec![
        NamedTensor::bytes("kind", b"calibration".to_vec()),
        NamedTensor::scalars(
            "calib.meta",
            vec![
                m.t_sample as f32,
                m.interval as f32,
                m.per_step as f32,
                m.total as f32,
                if m.single_step { 1.0 } else { 0.0 },
            ],
        ),
        NamedTensor::bytes("calib.seed", m.seed.to_le_bytes().to_vec()),
        NamedTensor::f32("calib.x", &set.x),
        NamedTensor::scalars("calib.t", set.t.iter().map(|&t| t as f32).collect()),
        NamedTensor::scalars(
            "calib.iteration",
            set.iteration.iter().map(|&i| i as f32).collect(),
        ),
    ]
}

pub fn calibration_from_tensors(tensors: &[NamedTensor]) -> Result<CalibrationSet> {
    expect_kind(tensors, "calibration")?;
    let m = find(tensors, "calib.meta")?.as_f32()?;
    if m.len() != 5 {
        return Err(malformed("calib.meta must hold 5 values"));
    }
    let seed = find(tensors, "calib.seed")?.as_bytes()?;
    let seed = u64::from_le_bytes(
        seed.try_into()
            .map_err(|_| malformed("calib.seed must be 8 bytes"))?,
    );
    let ints = |name: &str| -> Result<Vec<usize>> {
        find(tensors, name)?
            .as_f32()?
            .iter()
            .map(|&v| as_usize(v, name))
            .collect()
    };
    let set = CalibrationSet {
        x: find(tensors, "calib.x")?.to_tensor()?,
        t: ints("calib.t")?,
        iteration: ints("calib.iteration")?,
        meta: CalibMeta {
            t_sample: as_usize(m[0], "t_sample")?,
            interval: as_usize(m[1], "interval")?,
            per_step: as_usize(m[2], "per_step")?,
            total: as_usize(m[3], "total")?,
            seed,
            single_step: m[4] != 0.0,
        },
    };
    if set.x.rows() != set.t.len()
        || set.t.len() != set.iteration.len()
        || set.meta.total != set.t.len()
    {
        return Err(malformed("calibration tensors disagree in length"));
    }
    Ok(set)
}

pub fn save_model(path: &Path, model: &NoisePredictor<f32>) -> Result<()> {
    save_checkpoint(path, &model_to_tensors(model))
}

pub fn load_model(path: &Path) -> Result<NoisePredictor<f32>> {
    model_from_tensors(&load_checkpoint(path)?)
}

pub fn save_quantized(path: &Path, qm: &QuantizedModel) -> Result<()> {
    save_checkpoint(path, &quantized_to_tensors(qm))
}

pub fn load_quantized(path: &Path) -> Result<QuantizedModel> {
    quantized_from_tensors(&load_checkpoint(path)?)
}

pub fn save_calibration(path: &Path, set: &CalibrationSet) -> Result<()> {
    save_checkpoint(path, &calibration_to_tensors(set))
}

pub fn load_calibration(path: &Path) -> Result<CalibrationSet> {
    calibration_from_tensors(&load_checkpoint(path)?)
}

/// Either kind of network stored in a checkpoint.
#[derive(Clone, Debug)]
pub enum AnyModel {
    Fp(NoisePredictor<f32>),
    Quantized(QuantizedModel),
}

impl AnyModel {
    pub fn base(&self) -> &NoisePredictor<f32> {
        match self {
            AnyModel::Fp(m) => m,
            AnyModel::Quantized(q) => q.base(),
        }
    }
}

impl crate::diffusion::Denoiser for AnyModel {
    fn data_dim(&self) -> usize {
        self.base().arch().data_dim
    }

    fn predict(&self, x: &Tensor<f32>, t: usize) -> Result<Tensor<f32>> {
        match self {
            AnyModel::Fp(m) => m.predict(x, t),
            AnyModel::Quantized(q) => q.predict(x, t),
        }
    }

    fn arch(&self) -> Option<&Arch> {
        Some(self.base().arch())
    }
}

pub fn load_any(path: &Path) -> Result<AnyModel> {
    let tensors = load_checkpoint(path)?;
    match kind_of(&tensors)?.as_str() {
        "model" => Ok(AnyModel::Fp(model_from(&tensors)?)),
        "quantized" => Ok(AnyModel::Quantized(quantized_from_tensors(&tensors)?)),
        other => Err(malformed(format!("{other} checkpoint holds no network"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::Rng;
    use crate::quant::ScaleRule;

    #[test]
    fn model_round_trip() {
        let m = NoisePredictor::<f32>::init(Arch::default(), &mut Rng::new(1)).unwrap();
        assert_eq!(model_from_tensors(&model_to_tensors(&m)).unwrap(), m);
        let arch = Arch {
            skip: None,
            n_blocks: 1,
            ..Arch::default()
        };
        let m = NoisePredictor::<f32>::init(arch, &mut Rng::new(1)).unwrap();
        assert_eq!(model_from_tensors(&model_to_tensors(&m)).unwrap(), m);
    }

    #[test]
    fn quantized_round_trip_with_every_slot_kind() {
        let m = NoisePredictor::<f32>::init(Arch::default(), &mut Rng::new(1)).unwrap();
        let cfg = QuantConfig::parse("bits_w=4\nbits_a=8\noverride.block1.fc2=exempt").unwrap();
        let mut qm = QuantizedModel::new(m.clone(), cfg).unwrap();
        let t = quantized_to_tensors(&qm);
        assert_eq!(quantized_from_tensors(&t).unwrap(), qm);
        qm.init_weights(ScaleRule::MinMax).unwrap();
        let w0 = m.params()[0].weight.clone();
        let p = qm.weight_slot(0).params().unwrap().clone();
        let soft = QuantizerParams {
            rounding: Rounding::AdaRound {
                v: crate::calib::adaround::init_rounding_vars(&w0, &p),
            },
            ..p.clone()
        };
        qm.set_weight_quantizer(0, soft).unwrap();
        let hard = QuantizerParams {
            rounding: Rounding::Fixed {
                up: (0..m.params()[1].weight.len())
                    .map(|k| k % 3 == 0)
                    .collect(),
            },
            ..qm.weight_slot(1).params().unwrap().clone()
        };
        qm.set_weight_quantizer(1, hard).unwrap();
        let x = crate::netcore::rng_normal::<f32>(&mut Rng::new(2), &[32, 2]);
        qm.init_activations_minmax(&x, &[500]).unwrap();
        let back = quantized_from_tensors(&quantized_to_tensors(&qm)).unwrap();
        assert_eq!(back, qm);
        assert!(model_from_tensors(&quantized_to_tensors(&qm)).is_err());
    }
}
