use super::config::{Precision, QuantConfig};
use super::quantizer::{
    init_activation_minmax, init_scale_minmax, init_scale_mse, quantize_dequantize, QuantizerParams,
};
use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::netcore::{
    run_network, ActivationRecord, LayerView, NoisePredictor, Real, Tape, Tensor, Var,
};

/// Quantizer state of one layer input or weight.
#[derive(Clone, Debug, PartialEq)]
pub enum Slot {
    /// Runs at full precision.
    Bypass,
    /// Will be quantized at `bits` once initialized.
    Uninit {
        bits: u32,
    },
    Ready(QuantizerParams),
}

impl Slot {
    fn from_precision(p: Precision) -> Self {
        match p {
            Precision::Exempt => Slot::Bypass,
            Precision::Bits(bits) => Slot::Uninit { bits },
        }
    }

    pub fn params(&self) -> Option<&QuantizerParams> {
        match self {
            Slot::Ready(p) => Some(p),
            _ => None,
        }
    }
}

/// Weight-initialization rule for [`QuantizedModel::init_weights`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScaleRule {
    MinMax,
    Mse { candidates: usize },
}

/// A frozen full-precision network plus per-layer weight and input
/// quantizers. Activation quantizers are shared by all timesteps.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedModel {
    base: NoisePredictor<f32>,
    config: QuantConfig,
    weight_q: Vec<Slot>,
    act_q: Vec<Slot>,
}

impl QuantizedModel {
    pub fn new(base: NoisePredictor<f32>, config: QuantConfig) -> Result<Self> {
        config.validate_for(&base)?;
        let weight_q = base
            .layers()
            .iter()
            .map(|l| Slot::from_precision(config.weight_precision(&l.name)))
            .collect();
        let act_q = base
            .layers()
            .iter()
            .map(|l| Slot::from_precision(config.act_precision(&l.name)))
            .collect();
        Ok(QuantizedModel {
            base,
            config,
            weight_q,
            act_q,
        })
    }

    /// Rebuilds a model from stored quantizers (checkpoint loading).
    pub fn from_parts(
        base: NoisePredictor<f32>,
        config: QuantConfig,
        weight_q: Vec<Slot>,
        act_q: Vec<Slot>,
    ) -> Result<Self> {
        let n = base.layers().len();
        if weight_q.len() != n || act_q.len() != n {
            return Err(Error::Shape("one quantizer slot per layer required".into()));
        }
        Ok(QuantizedModel {
            base,
            config,
            weight_q,
            act_q,
        })
    }

    pub fn base(&self) -> &NoisePredictor<f32> {
        &self.base
    }

    pub fn config(&self) -> &QuantConfig {
        &self.config
    }

    pub fn weight_slot(&self, layer: usize) -> &Slot {
        &self.weight_q[layer]
    }

    pub fn act_slot(&self, layer: usize) -> &Slot {
        &self.act_q[layer]
    }

    pub fn weight_slots(&self) -> &[Slot] {
        &self.weight_q
    }

    pub fn act_slots(&self) -> &[Slot] {
        &self.act_q
    }

    pub fn set_weight_quantizer(&mut self, layer: usize, p: QuantizerParams) -> Result<()> {
        if matches!(self.weight_q[layer], Slot::Bypass) {
            return Err(Error::State(format!(
                "layer {} weights are exempt from quantization",
                self.base.layers()[layer].name
            )));
        }
        p.validate()?;
        self.weight_q[layer] = Slot::Ready(p);
        Ok(())
    }

    pub fn set_act_quantizer(&mut self, layer: usize, p: QuantizerParams) -> Result<()> {
        if matches!(self.act_q[layer], Slot::Bypass) {
            return Err(Error::State(format!(
                "layer {} activations are exempt from quantization",
                self.base.layers()[layer].name
            )));
        }
        p.validate()?;
        self.act_q[layer] = Slot::Ready(p);
        Ok(())
    }

    /// Initializes every non-exempt weight quantizer with nearest rounding.
    pub fn init_weights(&mut self, rule: ScaleRule) -> Result<()> {
        let gran = self.config.granularity_w;
        for (i, slot) in self.weight_q.iter_mut().enumerate() {
            let bits = match slot {
                Slot::Bypass => continue,
                Slot::Uninit { bits } => *bits,
                Slot::Ready(p) => p.bits,
            };
            let w = &self.base.params()[i].weight;
            let p = match rule {
                ScaleRule::MinMax => init_scale_minmax(w, bits, gran)?,
                ScaleRule::Mse { candidates } => init_scale_mse(w, bits, gran, candidates)?,
            };
            *slot = Slot::Ready(p);
        }
        Ok(())
    }

    /// Sets each activation quantizer from the min/max of the layer's input
    /// over `(x, t)` batches, with weights quantized and activations at full
    /// precision.
    pub fn init_activations_minmax(&mut self, x: &Tensor<f32>, t: &[usize]) -> Result<()> {
        if !self.config.act_quant_enabled() {
            return Ok(());
        }
        let ranges = self.input_ranges(x, t)?;
        for (i, slot) in self.act_q.iter_mut().enumerate() {
            let bits = match slot {
                Slot::Bypass => continue,
                Slot::Uninit { bits } => *bits,
                Slot::Ready(p) => p.bits,
            };
            let (lo, hi) = ranges[i];
            *slot = Slot::Ready(init_activation_minmax(lo, hi, bits)?);
        }
        Ok(())
    }

    fn input_ranges(&self, x: &Tensor<f32>, t: &[usize]) -> Result<Vec<(f32, f32)>> {
        let view = QuantView::weights_only(self);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let trace = run_network(
            self.base.arch(),
            self.base.layers(),
            &view,
            &mut tape,
            xv,
            t,
        )?;
        let rec = ActivationRecord::from_trace(&tape, &trace, self.base.layers());
        Ok(rec
            .layers
            .iter()
            .map(|l| {
                l.input
                    .data()
                    .iter()
                    .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                        (lo.min(v), hi.max(v))
                    })
            })
            .collect())
    }

    /// Weight used by layer `i` in the quantized forward pass.
    pub fn effective_weight(&self, layer: usize) -> Result<Tensor<f32>> {
        let w = &self.base.params()[layer].weight;
        match &self.weight_q[layer] {
            Slot::Bypass => Ok(w.clone()),
            Slot::Uninit { .. } => Err(Error::State(format!(
                "weight quantizer of {} is not initialized",
                self.base.layers()[layer].name
            ))),
            Slot::Ready(p) => quantize_dequantize(w, p),
        }
    }

    pub fn forward(&self, x: &Tensor<f32>, t: &[usize]) -> Result<Tensor<f32>> {
        Ok(self.forward_with_record(x, t)?.0)
    }

    /// Quantized forward pass with the per-layer activation record.
    pub fn forward_with_record(
        &self,
        x: &Tensor<f32>,
        t: &[usize],
    ) -> Result<(Tensor<f32>, ActivationRecord<f32>)> {
        let view = QuantView::full(self);
        view.check_ready()?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let trace = run_network(
            self.base.arch(),
            self.base.layers(),
            &view,
            &mut tape,
            xv,
            t,
        )?;
        let rec = ActivationRecord::from_trace(&tape, &trace, self.base.layers());
        Ok((tape.value(trace.out).clone(), rec))
    }
}

impl Denoiser for QuantizedModel {
    fn data_dim(&self) -> usize {
        self.base.arch().data_dim
    }

    fn predict(&self, x: &Tensor<f32>, t: usize) -> Result<Tensor<f32>> {
        self.forward(x, &[t])
    }

    fn arch(&self) -> Option<&crate::netcore::Arch> {
        Some(self.base.arch())
    }
}

/// Predicted noise and activation record of the quantized network.
pub fn quantized_forward(
    qm: &QuantizedModel,
    x: &Tensor<f32>,
    t: &[usize],
) -> Result<(Tensor<f32>, ActivationRecord<f32>)> {
    qm.forward_with_record(x, t)
}

/// A [`LayerView`] over a [`QuantizedModel`] with per-layer control over
/// which weights are quantized and whether input quantizers apply.
#[derive(Clone, Debug)]
pub struct QuantView<'a> {
    pub qm: &'a QuantizedModel,
    pub quant_weights: Vec<bool>,
    pub quant_acts: Vec<bool>,
}

impl<'a> QuantView<'a> {
    pub fn full(qm: &'a QuantizedModel) -> Self {
        let n = qm.base.layers().len();
        QuantView {
            qm,
            quant_weights: vec![true; n],
            quant_acts: vec![qm.config.act_quant_enabled(); n],
        }
    }

    pub fn weights_only(qm: &'a QuantizedModel) -> Self {
        let n = qm.base.layers().len();
        QuantView {
            qm,
            quant_weights: vec![true; n],
            quant_acts: vec![false; n],
        }
    }

    pub fn full_precision(qm: &'a QuantizedModel) -> Self {
        let n = qm.base.layers().len();
        QuantView {
            qm,
            quant_weights: vec![false; n],
            quant_acts: vec![false; n],
        }
    }

    fn check_ready(&self) -> Result<()> {
        for (i, spec) in self.qm.base.layers().iter().enumerate() {
            let w_uninit =
                self.quant_weights[i] && matches!(self.qm.weight_q[i], Slot::Uninit { .. });
            let a_uninit = self.quant_acts[i] && matches!(self.qm.act_q[i], Slot::Uninit { .. });
            if w_uninit || a_uninit {
                return Err(Error::State(format!(
                    "{} quantizer of {} is not initialized",
                    if w_uninit { "weight" } else { "activation" },
                    spec.name
                )));
            }
        }
        Ok(())
    }
}

impl<T: Real> LayerView<T> for QuantView<'_> {
    fn weights(&self, tape: &mut Tape<T>, layer: usize) -> Result<(Var, Var)> {
        let p = &self.qm.base.params()[layer];
        let w = if self.quant_weights[layer] {
            self.qm.effective_weight(layer)?
        } else {
            p.weight.clone()
        };
        Ok((tape.constant(w.cast()), tape.constant(p.bias.cast())))
    }

    fn input(&self, tape: &mut Tape<T>, layer: usize, x: Var) -> Result<Var> {
        if !self.quant_acts[layer] {
            return Ok(x);
        }
        match &self.qm.act_q[layer] {
            Slot::Bypass => Ok(x),
            Slot::Uninit { .. } => Err(Error::State(format!(
                "activation quantizer of {} is not initialized",
                self.qm.base.layers()[layer].name
            ))),
            Slot::Ready(p) => apply_act_quant(tape, x, p),
        }
    }
}

/// Puts a fixed activation quantizer on the tape.
pub fn apply_act_quant<T: Real>(tape: &mut Tape<T>, x: Var, p: &QuantizerParams) -> Result<Var> {
    let log_s = tape.constant(Tensor::full(&[1], T::from_f32(p.scale[0].ln()).unwrap()));
    tape.act_quant(
        x,
        log_s,
        T::from_i32(p.zero_offset).unwrap(),
        T::from_i32(p.cmin).unwrap(),
        T::from_i32(p.cmax).unwrap(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::{rng_normal, Arch, Rng};
    use crate::quant::config::BYPASS_BITS;

    fn model() -> NoisePredictor<f32> {
        NoisePredictor::init(Arch::default(), &mut Rng::new(1)).unwrap()
    }

    #[test]
    fn bypass_is_bit_identical_to_fp() {
        let m = model();
        let cfg = QuantConfig {
            bits_w: BYPASS_BITS,
            bits_a: BYPASS_BITS,
            ..Default::default()
        };
        let qm = QuantizedModel::new(m.clone(), cfg).unwrap();
        let x = rng_normal::<f32>(&mut Rng::new(2), &[16, 2]);
        let (a, ra) = m.forward_with_record(&x, &[40]).unwrap();
        let (b, rb) = qm.forward_with_record(&x, &[40]).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn uninitialized_quantizer_is_state_error() {
        let qm = QuantizedModel::new(model(), QuantConfig::weights_only(4)).unwrap();
        let x = Tensor::zeros(&[1, 2]);
        assert!(matches!(qm.forward(&x, &[1]), Err(Error::State(_))));
    }

    #[test]
    fn exempt_layer_keeps_fp_weights() {
        let m = model();
        let cfg = QuantConfig::parse("bits_w=4\nbits_a=32\noverride.block1.fc2=exempt").unwrap();
        let mut qm = QuantizedModel::new(m.clone(), cfg).unwrap();
        qm.init_weights(ScaleRule::MinMax).unwrap();
        let i = m.layer_index("block1.fc2").unwrap();
        assert_eq!(qm.weight_slot(i), &Slot::Bypass);
        assert_eq!(qm.effective_weight(i).unwrap(), m.params()[i].weight);
        // Same input to the exempt layer gives the same affine output.
        let x = rng_normal::<f32>(&mut Rng::new(3), &[8, 2]);
        let (_, rec) = qm.forward_with_record(&x, &[100]).unwrap();
        let layer = rec.get("block1.fc2").unwrap();
        let expect = layer
            .input
            .matmul_nt(&m.params()[i].weight)
            .unwrap()
            .zip_map(
                &Tensor::new(
                    vec![8, 64],
                    (0..8)
                        .flat_map(|_| m.params()[i].bias.data().to_vec())
                        .collect(),
                )
                .unwrap(),
                |a, b| a + b,
            )
            .unwrap();
        assert_eq!(layer.pre, expect);
        assert!(qm
            .set_weight_quantizer(i, QuantizerParams::symmetric(4, vec![1.0]).unwrap())
            .is_err());
    }

    #[test]
    fn activation_init_then_forward() {
        let m = model();
        let mut qm = QuantizedModel::new(m, QuantConfig::default()).unwrap();
        qm.init_weights(ScaleRule::MinMax).unwrap();
        let x = rng_normal::<f32>(&mut Rng::new(4), &[32, 2]);
        let t: Vec<usize> = (1..=32).map(|i| i * 30).collect();
        assert!(qm.forward(&x, &t).is_err());
        qm.init_activations_minmax(&x, &t).unwrap();
        let y = qm.forward(&x, &t).unwrap();
        assert!(y.all_finite());
    }
}
