//! The toy noise-prediction network.
//!
//! Topology: `input_proj` lifts the 2-D point to the hidden width, then a
//! chain of residual blocks, then `output_proj` back to the data width. Each
//! residual block computes
//!
//! ```text
//! u   = silu(fc1(x) + temb(emb(t)))
//! out = shortcut(x) + fc2(u)
//! ```
//!
//! where `shortcut` is the identity, or the `skip` affine layer when the
//! block input is wider than the hidden width. A single U-Net-style
//! concatenation link feeds an early block's output into a later block's
//! input, `[h_prev, h_early]`.

use super::rng::{rng_normal, Rng};
use super::tape::{Tape, Var};
use super::tensor::{r, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Arch {
    pub data_dim: usize,
    pub width: usize,
    pub n_blocks: usize,
    pub emb_dim: usize,
    pub freq_base: f64,
    /// `(from, to)`: output of block `from` is concatenated onto the input of
    /// block `to` (zero-based).
    pub skip: Option<(usize, usize)>,
}

impl Default for Arch {
    fn default() -> Self {
        Arch {
            data_dim: 2,
            width: 64,
            n_blocks: 4,
            emb_dim: 32,
            freq_base: 10_000.0,
            skip: Some((0, 2)),
        }
    }
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.width == 0 {
            return Err(Error::Param("zero-width network".into()));
        }
        if self.emb_dim < 2 || !self.emb_dim.is_multiple_of(2) {
            return Err(Error::Param(format!(
                "time embedding dim must be even and >= 2, got {}",
                self.emb_dim
            )));
        }
        if let Some((from, to)) = self.skip {
            if from >= to || to >= self.n_blocks {
                return Err(Error::Param(format!(
                    "skip link {from}->{to} invalid for {} blocks",
                    self.n_blocks
                )));
            }
        }
        Ok(())
    }

    fn block_input_width(&self, k: usize) -> usize {
        match self.skip {
            Some((_, to)) if to == k => 2 * self.width,
            _ => self.width,
        }
    }
}

/// Unit of the network that is calibrated jointly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    InputProj,
    Residual(usize),
    OutputProj,
}

impl Stage {
    pub fn name(&self) -> String {
        match self {
            Stage::InputProj => "input_proj".into(),
            Stage::Residual(k) => format!("block{k}"),
            Stage::OutputProj => "output_proj".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerRole {
    InputProj,
    Fc1,
    Temb,
    Fc2,
    Shortcut,
    OutputProj,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub stage: Stage,
    pub role: LayerRole,
}

/// Builds the ordered (topological) list of quantizable affine layers.
pub fn layer_specs(arch: &Arch) -> Vec<LayerSpec> {
    let mut v = vec![LayerSpec {
        name: "input_proj".into(),
        in_dim: arch.data_dim,
        out_dim: arch.width,
        stage: Stage::InputProj,
        role: LayerRole::InputProj,
    }];
    for k in 0..arch.n_blocks {
        let in_w = arch.block_input_width(k);
        let stage = Stage::Residual(k);
        v.push(LayerSpec {
            name: format!("block{k}.fc1"),
            in_dim: in_w,
            out_dim: arch.width,
            stage,
            role: LayerRole::Fc1,
        });
        v.push(LayerSpec {
            name: format!("block{k}.temb"),
            in_dim: arch.emb_dim,
            out_dim: arch.width,
            stage,
            role: LayerRole::Temb,
        });
        v.push(LayerSpec {
            name: format!("block{k}.fc2"),
            in_dim: arch.width,
            out_dim: arch.width,
            stage,
            role: LayerRole::Fc2,
        });
        if in_w != arch.width {
            v.push(LayerSpec {
                name: format!("block{k}.skip"),
                in_dim: in_w,
                out_dim: arch.width,
                stage,
                role: LayerRole::Shortcut,
            });
        }
    }
    v.push(LayerSpec {
        name: "output_proj".into(),
        in_dim: arch.width,
        out_dim: arch.data_dim,
        stage: Stage::OutputProj,
        role: LayerRole::OutputProj,
    });
    v
}

/// Stages in execution order.
pub fn stages(arch: &Arch) -> Vec<Stage> {
    let mut v = vec![Stage::InputProj];
    v.extend((0..arch.n_blocks).map(Stage::Residual));
    v.push(Stage::OutputProj);
    v
}

#[derive(Clone, Debug, PartialEq)]
pub struct Affine<T: Real = f32> {
    /// `[out, in]`
    pub weight: Tensor<T>,
    /// `[out]`
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoisePredictor<T: Real = f32> {
    arch: Arch,
    layers: Vec<LayerSpec>,
    params: Vec<Affine<T>>,
}

/// How a forward pass sees each affine layer: which weights it multiplies by
/// and what happens to the layer's input before the product.
pub trait LayerView<T: Real> {
    fn weights(&self, tape: &mut Tape<T>, layer: usize) -> Result<(Var, Var)>;

    fn input(&self, _tape: &mut Tape<T>, _layer: usize, x: Var) -> Result<Var> {
        Ok(x)
    }
}

/// Per-layer values captured during one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LayerTrace {
    /// Input as consumed by the product (after any activation quantizer).
    pub input: Var,
    /// Affine output.
    pub pre: Var,
    /// Value after the nonlinearity or residual join that follows the layer.
    pub post: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub out: Var,
    pub emb: Var,
    pub stage_inputs: Vec<Var>,
    pub stage_outputs: Vec<Var>,
    pub layers: Vec<Option<LayerTrace>>,
}

/// Materialized activations of every quantizable layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationRecord<T: Real = f32> {
    pub layers: Vec<LayerActivation<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerActivation<T: Real = f32> {
    pub name: String,
    pub input: Tensor<T>,
    pub pre: Tensor<T>,
    pub post: Tensor<T>,
}

impl<T: Real> ActivationRecord<T> {
    pub fn from_trace(tape: &Tape<T>, trace: &ForwardTrace, specs: &[LayerSpec]) -> Self {
        let layers = specs
            .iter()
            .zip(&trace.layers)
            .filter_map(|(spec, lt)| {
                lt.map(|lt| LayerActivation {
                    name: spec.name.clone(),
                    input: tape.value(lt.input).clone(),
                    pre: tape.value(lt.pre).clone(),
                    post: tape.value(lt.post).clone(),
                })
            })
            .collect();
        ActivationRecord { layers }
    }

    pub fn get(&self, name: &str) -> Option<&LayerActivation<T>> {
        self.layers.iter().find(|l| l.name == name)
    }
}

/// Sinusoidal embedding rows for the given timesteps: the first half holds
/// `sin(t * f_i)`, the second `cos(t * f_i)` with `f_i = base^(-i/half)`.
pub fn time_embedding<T: Real>(t: &[usize], dim: usize, base: f64) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let tf = ti as f64;
        let freqs = (0..half).map(|i| base.powf(-(i as f64) / half as f64));
        let args: Vec<f64> = freqs.map(|f| tf * f).collect();
        data.extend(args.iter().map(|a| T::from_f64_lossy(a.sin())));
        data.extend(args.iter().map(|a| T::from_f64_lossy(a.cos())));
    }
    Tensor::new(vec![t.len(), dim], data).expect("embedding shape")
}

impl<T: Real> NoisePredictor<T> {
    /// Weights drawn `N(0, 1/fan_in)`, biases zero.
    pub fn init(arch: Arch, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let layers = layer_specs(&arch);
        let params = layers
            .iter()
            .map(|l| {
                let std = r::<T>(1.0 / (l.in_dim as f64).sqrt());
                Affine {
                    weight: rng_normal::<T>(rng, &[l.out_dim, l.in_dim]).scale(std),
                    bias: Tensor::zeros(&[l.out_dim]),
                }
            })
            .collect();
        Ok(NoisePredictor {
            arch,
            layers,
            params,
        })
    }

    pub fn zeros(arch: Arch) -> Result<Self> {
        arch.validate()?;
        let layers = layer_specs(&arch);
        let params = layers
            .iter()
            .map(|l| Affine {
                weight: Tensor::zeros(&[l.out_dim, l.in_dim]),
                bias: Tensor::zeros(&[l.out_dim]),
            })
            .collect();
        Ok(NoisePredictor {
            arch,
            layers,
            params,
        })
    }

    /// Assembles a model from explicit parameters, checking every shape.
    pub fn from_params(arch: Arch, params: Vec<Affine<T>>) -> Result<Self> {
        arch.validate()?;
        let layers = layer_specs(&arch);
        if layers.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} layers but {} parameter sets",
                layers.len(),
                params.len()
            )));
        }
        for (l, p) in layers.iter().zip(&params) {
            if p.weight.shape() != [l.out_dim, l.in_dim] || p.bias.shape() != [l.out_dim] {
                return Err(Error::Shape(format!(
                    "layer {}: weight {:?} bias {:?}, expected [{}, {}] / [{}]",
                    l.name,
                    p.weight.shape(),
                    p.bias.shape(),
                    l.out_dim,
                    l.in_dim,
                    l.out_dim
                )));
            }
        }
        Ok(NoisePredictor {
            arch,
            layers,
            params,
        })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Affine<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Affine<T>] {
        &mut self.params
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.params
            .iter()
            .map(|p| p.weight.len() + p.bias.len())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> NoisePredictor<U> {
        NoisePredictor {
            arch: self.arch.clone(),
            layers: self.layers.clone(),
            params: self
                .params
                .iter()
                .map(|p| Affine {
                    weight: p.weight.cast(),
                    bias: p.bias.cast(),
                })
                .collect(),
        }
    }

    /// Places every weight and bias on the tape, trainable or constant.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundWeights {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    (tape.param(p.weight.clone()), tape.param(p.bias.clone()))
                } else {
                    (
                        tape.constant(p.weight.clone()),
                        tape.constant(p.bias.clone()),
                    )
                }
            })
            .collect();
        BoundWeights { vars }
    }

    /// Predicted noise for a batch `x [B, data_dim]` at timesteps `t` (one per
    /// row, or a single value for the whole batch).
    pub fn forward(&self, x: &Tensor<T>, t: &[usize]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let view = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let trace = run_network(&self.arch, &self.layers, &view, &mut tape, xv, t)?;
        Ok(tape.value(trace.out).clone())
    }

    pub fn forward_with_record(
        &self,
        x: &Tensor<T>,
        t: &[usize],
    ) -> Result<(Tensor<T>, ActivationRecord<T>)> {
        let mut tape = Tape::new();
        let view = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let trace = run_network(&self.arch, &self.layers, &view, &mut tape, xv, t)?;
        let rec = ActivationRecord::from_trace(&tape, &trace, &self.layers);
        Ok((tape.value(trace.out).clone(), rec))
    }
}

/// Weight handles produced by [`NoisePredictor::bind`].
#[derive(Clone, Debug)]
pub struct BoundWeights {
    pub vars: Vec<(Var, Var)>,
}

impl<T: Real> LayerView<T> for BoundWeights {
    fn weights(&self, _tape: &mut Tape<T>, layer: usize) -> Result<(Var, Var)> {
        Ok(self.vars[layer])
    }
}

fn expand_t(t: &[usize], batch: usize) -> Result<Vec<usize>> {
    match t.len() {
        1 => Ok(vec![t[0]; batch]),
        n if n == batch => Ok(t.to_vec()),
        n => Err(Error::Shape(format!(
            "{n} timesteps for a batch of {batch}"
        ))),
    }
}

struct LayerCtx<'a, T: Real, V: LayerView<T> + ?Sized> {
    specs: &'a [LayerSpec],
    view: &'a V,
    index: &'a dyn Fn(&str) -> usize,
    _t: std::marker::PhantomData<T>,
}

impl<T: Real, V: LayerView<T> + ?Sized> LayerCtx<'_, T, V> {
    /// Applies one affine layer and checks its output is finite.
    fn apply(&self, tape: &mut Tape<T>, name: &str, x: Var) -> Result<(usize, Var, Var)> {
        let idx = (self.index)(name);
        let xin = self.view.input(tape, idx, x)?;
        let (w, b) = self.view.weights(tape, idx)?;
        let want = self.specs[idx].in_dim;
        if tape.value(xin).cols() != want {
            return Err(Error::Shape(format!(
                "layer {} expects width {}, got {}",
                name,
                want,
                tape.value(xin).cols()
            )));
        }
        let y = tape.linear(xin, w, Some(b))?;
        if !tape.value(y).all_finite() {
            return Err(Error::NonFinite {
                location: format!("layer {name}"),
            });
        }
        Ok((idx, xin, y))
    }
}

/// Runs one stage. `input` is the stage input (for a residual block, already
/// concatenated with its skip source); `emb` is the time embedding.
#[allow(clippy::too_many_arguments)]
pub fn run_stage<T: Real, V: LayerView<T> + ?Sized>(
    arch: &Arch,
    specs: &[LayerSpec],
    view: &V,
    tape: &mut Tape<T>,
    stage: Stage,
    input: Var,
    emb: Var,
    traces: &mut [Option<LayerTrace>],
) -> Result<Var> {
    let index = |name: &str| {
        specs
            .iter()
            .position(|l| l.name == name)
            .expect("layer names come from layer_specs")
    };
    let ctx = LayerCtx {
        specs,
        view,
        index: &index,
        _t: std::marker::PhantomData,
    };
    match stage {
        Stage::InputProj => {
            let (i, xin, y) = ctx.apply(tape, "input_proj", input)?;
            traces[i] = Some(LayerTrace {
                input: xin,
                pre: y,
                post: y,
            });
            Ok(y)
        }
        Stage::Residual(k) => {
            let (i1, x1, a) = ctx.apply(tape, &format!("block{k}.fc1"), input)?;
            let (it, xt, te) = ctx.apply(tape, &format!("block{k}.temb"), emb)?;
            let z = tape.add(a, te)?;
            let u = tape.silu(z);
            let (i2, x2, h) = ctx.apply(tape, &format!("block{k}.fc2"), u)?;
            let shortcut = if arch.block_input_width(k) != arch.width {
                let (is, xs, sc) = ctx.apply(tape, &format!("block{k}.skip"), input)?;
                Some((is, xs, sc))
            } else {
                None
            };
            let sc = shortcut.map_or(input, |(_, _, sc)| sc);
            let out = tape.add(sc, h)?;
            traces[i1] = Some(LayerTrace {
                input: x1,
                pre: a,
                post: u,
            });
            traces[it] = Some(LayerTrace {
                input: xt,
                pre: te,
                post: u,
            });
            traces[i2] = Some(LayerTrace {
                input: x2,
                pre: h,
                post: out,
            });
            if let Some((is, xs, scv)) = shortcut {
                traces[is] = Some(LayerTrace {
                    input: xs,
                    pre: scv,
                    post: out,
                });
            }
            Ok(out)
        }
        Stage::OutputProj => {
            let act = tape.silu(input);
            let (i, xin, y) = ctx.apply(tape, "output_proj", act)?;
            traces[i] = Some(LayerTrace {
                input: xin,
                pre: y,
                post: y,
            });
            Ok(y)
        }
    }
}

/// Full forward pass on a tape through an arbitrary [`LayerView`].
pub fn run_network<T: Real, V: LayerView<T> + ?Sized>(
    arch: &Arch,
    specs: &[LayerSpec],
    view: &V,
    tape: &mut Tape<T>,
    x: Var,
    t: &[usize],
) -> Result<ForwardTrace> {
    let xs = tape.value(x);
    if xs.shape().len() != 2 || xs.cols() != arch.data_dim {
        return Err(Error::Shape(format!(
            "input {:?} does not match data width {}",
            xs.shape(),
            arch.data_dim
        )));
    }
    let batch = xs.rows();
    let t = expand_t(t, batch)?;
    let emb = tape.constant(time_embedding(&t, arch.emb_dim, arch.freq_base));
    let mut traces = vec![None; specs.len()];
    let mut stage_inputs = Vec::new();
    let mut stage_outputs = Vec::new();

    stage_inputs.push(x);
    let mut h = run_stage(
        arch,
        specs,
        view,
        tape,
        Stage::InputProj,
        x,
        emb,
        &mut traces,
    )?;
    stage_outputs.push(h);
    let mut block_outs = Vec::with_capacity(arch.n_blocks);
    for k in 0..arch.n_blocks {
        let input = match arch.skip {
            Some((from, to)) if to == k => tape.concat(h, block_outs[from])?,
            _ => h,
        };
        stage_inputs.push(input);
        h = run_stage(
            arch,
            specs,
            view,
            tape,
            Stage::Residual(k),
            input,
            emb,
            &mut traces,
        )?;
        stage_outputs.push(h);
        block_outs.push(h);
    }
    stage_inputs.push(h);
    let out = run_stage(
        arch,
        specs,
        view,
        tape,
        Stage::OutputProj,
        h,
        emb,
        &mut traces,
    )?;
    stage_outputs.push(out);
    Ok(ForwardTrace {
        out,
        emb,
        stage_inputs,
        stage_outputs,
        layers: traces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_topology() {
        let specs = layer_specs(&Arch::default());
        // input + 4*(fc1,temb,fc2) + one skip projection + output
        assert_eq!(specs.len(), 1 + 12 + 1 + 1);
        let skip = specs.iter().find(|l| l.name == "block2.skip").unwrap();
        assert_eq!(skip.in_dim, 128);
        assert_eq!(
            specs
                .iter()
                .find(|l| l.name == "block2.fc1")
                .unwrap()
                .in_dim,
            128
        );
    }

    #[test]
    fn zero_model_outputs_output_bias() {
        let mut m = NoisePredictor::<f32>::zeros(Arch::default()).unwrap();
        let last = m.params().len() - 1;
        m.params_mut()[last].bias = Tensor::new(vec![2], vec![0.5, -1.25]).unwrap();
        let mut rng = Rng::new(4);
        let x = rng_normal::<f32>(&mut rng, &[3, 2]);
        let y = m.forward(&x, &[17]).unwrap();
        assert_eq!(y.data(), &[0.5, -1.25, 0.5, -1.25, 0.5, -1.25]);
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let m = NoisePredictor::<f32>::zeros(Arch::default()).unwrap();
        let x = Tensor::zeros(&[2, 3]);
        assert!(matches!(m.forward(&x, &[1]), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_names_first_layer() {
        let mut m = NoisePredictor::<f32>::init(Arch::default(), &mut Rng::new(1)).unwrap();
        m.params_mut()[1].bias.data_mut()[0] = f32::INFINITY;
        let x = Tensor::zeros(&[1, 2]);
        match m.forward(&x, &[5]) {
            Err(Error::NonFinite { location }) => assert_eq!(location, "layer block0.fc1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn forward_is_deterministic_and_shape_preserving() {
        let m = NoisePredictor::<f32>::init(Arch::default(), &mut Rng::new(7)).unwrap();
        let x = rng_normal::<f32>(&mut Rng::new(8), &[5, 2]);
        let a = m.forward(&x, &[1, 2, 3, 4, 5]).unwrap();
        let b = m.forward(&x, &[1, 2, 3, 4, 5]).unwrap();
        assert_eq!(a.shape(), x.shape());
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn removing_skip_link_changes_output() {
        let mut m = NoisePredictor::<f32>::init(Arch::default(), &mut Rng::new(11)).unwrap();
        let x = rng_normal::<f32>(&mut Rng::new(12), &[4, 2]);
        let before = m.forward(&x, &[300]).unwrap();
        // Zero every weight column that reads the concatenated skip half.
        for name in ["block2.fc1", "block2.skip"] {
            let i = m.layer_index(name).unwrap();
            let w = &mut m.params_mut()[i].weight;
            let cols = w.cols();
            for row in w.data_mut().chunks_mut(cols) {
                for v in &mut row[cols / 2..] {
                    *v = 0.0;
                }
            }
        }
        let after = m.forward(&x, &[300]).unwrap();
        assert_ne!(before, after);
    }

    #[test]
    fn record_covers_every_layer() {
        let m = NoisePredictor::<f32>::init(Arch::default(), &mut Rng::new(2)).unwrap();
        let x = rng_normal::<f32>(&mut Rng::new(3), &[6, 2]);
        let (_, rec) = m.forward_with_record(&x, &[10]).unwrap();
        assert_eq!(rec.layers.len(), m.layers().len());
        for (a, spec) in rec.layers.iter().zip(m.layers()) {
            assert_eq!(a.name, spec.name);
            assert_eq!(a.pre.shape(), &[6, spec.out_dim]);
            assert_eq!(a.input.shape(), &[6, spec.in_dim]);
        }
    }

    #[test]
    fn zero_blocks_is_valid() {
        let arch = Arch {
            n_blocks: 0,
            skip: None,
            ..Arch::default()
        };
        let m = NoisePredictor::<f32>::init(arch, &mut Rng::new(2)).unwrap();
        assert_eq!(m.layers().len(), 2);
        let y = m.forward(&Tensor::zeros(&[2, 2]), &[1]).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
    }
}
