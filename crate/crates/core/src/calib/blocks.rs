//! Reconstruction blocks and the data they are calibrated on.

use crate::error::{Error, Result};
use crate::netcore::model::stages;
use crate::netcore::{
    run_network, run_stage, time_embedding, LayerView, NoisePredictor, Real, Stage, Tape, Tensor,
    Var,
};
use crate::quant::{QuantView, QuantizedModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Residual,
    SingleLayer,
}

/// A contiguous group of layers calibrated jointly. The block output is
/// captured after the shortcut join (residual blocks) or after the layer
/// itself (projections).
#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionBlock {
    pub kind: BlockKind,
    pub stage: Stage,
    /// Position of `stage` in execution order; also the index into
    /// `ForwardTrace::stage_inputs` / `stage_outputs`.
    pub stage_index: usize,
    /// Layer indices, in topological order.
    pub layers: Vec<usize>,
    pub names: Vec<String>,
}

impl ReconstructionBlock {
    pub fn name(&self) -> String {
        self.stage.name()
    }
}

/// One block per residual block plus single-layer blocks for the two
/// projections, in execution order.
pub fn partition_blocks<T: Real>(model: &NoisePredictor<T>) -> Vec<ReconstructionBlock> {
    stages(model.arch())
        .into_iter()
        .enumerate()
        .map(|(stage_index, stage)| {
            let (layers, names): (Vec<usize>, Vec<String>) = model
                .layers()
                .iter()
                .enumerate()
                .filter(|(_, l)| l.stage == stage)
                .map(|(i, l)| (i, l.name.clone()))
                .unzip();
            ReconstructionBlock {
                kind: match stage {
                    Stage::Residual(_) => BlockKind::Residual,
                    _ => BlockKind::SingleLayer,
                },
                stage,
                stage_index,
                layers,
                names,
            }
        })
        .collect()
}

/// Index of the stage each layer belongs to.
pub fn layer_stage_indices<T: Real>(model: &NoisePredictor<T>) -> Vec<usize> {
    let st = stages(model.arch());
    model
        .layers()
        .iter()
        .map(|l| {
            st.iter()
                .position(|s| *s == l.stage)
                .expect("layer stage exists")
        })
        .collect()
}

/// Inputs, time embeddings and full-precision targets of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockData<T: Real = f32> {
    /// Stage input produced by the quantized prefix.
    pub input: Tensor<T>,
    pub emb: Tensor<T>,
    /// Full-precision block output on full-precision inputs.
    pub target: Tensor<T>,
}

impl<T: Real> BlockData<T> {
    pub fn len(&self) -> usize {
        self.input.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self, idx: &[usize]) -> BlockData<T> {
        BlockData {
            input: self.input.gather_rows(idx),
            emb: self.emb.gather_rows(idx),
            target: self.target.gather_rows(idx),
        }
    }

    pub fn cast<U: Real>(&self) -> BlockData<U> {
        BlockData {
            input: self.input.cast(),
            emb: self.emb.cast(),
            target: self.target.cast(),
        }
    }
}

/// The view used to compute block `b`'s inputs: layers of earlier stages use
/// their current weight quantizers (and input quantizers when
/// `prefix_acts`); everything from stage `b` on runs at full precision.
pub fn prefix_view<'a>(
    qm: &'a QuantizedModel,
    block: &ReconstructionBlock,
    prefix_acts: bool,
) -> QuantView<'a> {
    let stage_of = layer_stage_indices(qm.base());
    let mut view = QuantView::full_precision(qm);
    for (i, &s) in stage_of.iter().enumerate() {
        if s < block.stage_index {
            view.quant_weights[i] = true;
            view.quant_acts[i] = prefix_acts && qm.config().act_quant_enabled();
        }
    }
    view
}

/// Runs the quantized prefix and the full-precision network over `(x, t)` and
/// extracts the block's input and target.
pub fn capture_block_data(
    qm: &QuantizedModel,
    block: &ReconstructionBlock,
    x: &Tensor<f32>,
    t: &[usize],
    prefix_acts: bool,
) -> Result<BlockData<f32>> {
    if x.rows() == 0 {
        return Err(Error::Param("calibration set is empty".into()));
    }
    let base = qm.base();
    let (arch, specs) = (base.arch(), base.layers());

    let view = prefix_view(qm, block, prefix_acts);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let trace = run_network(arch, specs, &view, &mut tape, xv, t)?;
    let input = tape.value(trace.stage_inputs[block.stage_index]).clone();

    let fp = QuantView::full_precision(qm);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let trace = run_network(arch, specs, &fp, &mut tape, xv, t)?;
    let target = tape.value(trace.stage_outputs[block.stage_index]).clone();

    Ok(BlockData {
        input,
        emb: time_embedding(t, arch.emb_dim, arch.freq_base),
        target,
    })
}

/// Input quantizer placed on the tape by [`BlockView`].
#[derive(Clone, Copy, Debug)]
pub(crate) struct ActSpec {
    pub log_s: Var,
    pub zero: f64,
    pub cmin: f64,
    pub cmax: f64,
}

/// Pre-bound weights and input quantizers for the layers of one block.
pub(crate) struct BlockView {
    pub weights: Vec<Option<(Var, Var)>>,
    pub acts: Vec<Option<ActSpec>>,
}

impl<T: Real> LayerView<T> for BlockView {
    fn weights(&self, _tape: &mut Tape<T>, layer: usize) -> Result<(Var, Var)> {
        self.weights[layer]
            .ok_or_else(|| Error::State(format!("layer {layer} is not bound in this block")))
    }

    fn input(&self, tape: &mut Tape<T>, layer: usize, x: Var) -> Result<Var> {
        match self.acts[layer] {
            None => Ok(x),
            Some(a) => tape.act_quant(
                x,
                a.log_s,
                T::from_f64_lossy(a.zero),
                T::from_f64_lossy(a.cmin),
                T::from_f64_lossy(a.cmax),
            ),
        }
    }
}

/// Block output on the tape and its squared-distance loss against `target`.
pub(crate) fn block_recon_loss<T: Real, V: LayerView<T> + ?Sized>(
    model: &NoisePredictor<T>,
    block: &ReconstructionBlock,
    view: &V,
    tape: &mut Tape<T>,
    data: &BlockData<T>,
) -> Result<Var> {
    let input = tape.constant(data.input.clone());
    let emb = tape.constant(data.emb.clone());
    let mut traces = vec![None; model.layers().len()];
    let out = run_stage(
        model.arch(),
        model.layers(),
        view,
        tape,
        block.stage,
        input,
        emb,
        &mut traces,
    )?;
    let target = tape.constant(data.target.clone());
    tape.sq_dist_mean(out, target)
}

/// Full-precision output of one block for explicit inputs.
pub fn block_forward<T: Real>(
    model: &NoisePredictor<T>,
    block: &ReconstructionBlock,
    input: &Tensor<T>,
    emb: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let x = tape.constant(input.clone());
    let e = tape.constant(emb.clone());
    let mut traces = vec![None; model.layers().len()];
    let out = run_stage(
        model.arch(),
        model.layers(),
        &bound,
        &mut tape,
        block.stage,
        x,
        e,
        &mut traces,
    )?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::{Arch, Rng};
    use crate::quant::{QuantConfig, ScaleRule};
    use std::collections::BTreeSet;

    #[test]
    fn default_model_has_six_blocks() {
        let m = NoisePredictor::<f32>::zeros(Arch::default()).unwrap();
        let blocks = partition_blocks(&m);
        assert_eq!(blocks.len(), 6);
        assert_eq!(blocks[0].kind, BlockKind::SingleLayer);
        assert_eq!(blocks[5].kind, BlockKind::SingleLayer);
        assert_eq!(
            blocks[3].names,
            vec!["block2.fc1", "block2.temb", "block2.fc2", "block2.skip"]
        );
        let all: Vec<usize> = blocks.iter().flat_map(|b| b.layers.clone()).collect();
        assert_eq!(all, (0..m.layers().len()).collect::<Vec<_>>());
        let set: BTreeSet<usize> = all.iter().copied().collect();
        assert_eq!(set.len(), all.len());
    }

    #[test]
    fn zero_blocks_gives_single_layers() {
        let arch = Arch {
            n_blocks: 0,
            skip: None,
            ..Arch::default()
        };
        let m = NoisePredictor::<f32>::zeros(arch).unwrap();
        let blocks = partition_blocks(&m);
        assert_eq!(blocks.len(), 2);
        assert!(blocks.iter().all(|b| b.kind == BlockKind::SingleLayer));
    }

    #[test]
    fn prefix_input_matches_substituted_network() {
        let fp = NoisePredictor::<f32>::init(Arch::default(), &mut Rng::new(9)).unwrap();
        let mut qm = QuantizedModel::new(fp.clone(), QuantConfig::weights_only(3)).unwrap();
        qm.init_weights(ScaleRule::MinMax).unwrap();
        let x = crate::netcore::rng_normal::<f32>(&mut Rng::new(1), &[16, 2]);
        let t: Vec<usize> = (0..16).map(|i| 1 + 60 * i).collect();
        let blocks = partition_blocks(&fp);
        let k = 3;
        let data = capture_block_data(&qm, &blocks[k], &x, &t, false).unwrap();

        // Independent construction: copy quantized weights into the prefix.
        let stage_of = layer_stage_indices(&fp);
        let mut sub = fp.clone();
        for (i, p) in sub.params_mut().iter_mut().enumerate() {
            if stage_of[i] < blocks[k].stage_index {
                p.weight = qm.effective_weight(i).unwrap();
            }
        }
        let (_, rec) = sub.forward_with_record(&x, &t).unwrap();
        assert_eq!(rec.get("block2.fc1").unwrap().input, data.input);
        let (_, rec_fp) = fp.forward_with_record(&x, &t).unwrap();
        assert_eq!(rec_fp.get("block2.fc2").unwrap().post, data.target);
        assert_ne!(rec_fp.get("block2.fc1").unwrap().input, data.input);
    }
}
