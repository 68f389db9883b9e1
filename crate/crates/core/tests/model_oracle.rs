//! The model against a straight-line 64-bit GRU written from the cell
//! equations, plus gradient checks of the whole toy network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tonicnet::autodiff::{grad_check, AutodiffError, DiffFn, Element, Graph, Tensor, Var};
use tonicnet::encoder::{encode, StreamSet};
use tonicnet::corpus::{Piece, Split, TimeStep};
use tonicnet::model::{
    forward_step, record_sequence, step, BoundParams, DropoutPlan, HiddenState, ModelConfig, ModelError,
    ModelParams, CHECKPOINT_FIXED_HEADER,
};

fn tensor(params: &ModelParams, name: &str) -> Vec<f64> {
    let i = params.names().iter().position(|n| n == name).unwrap();
    params.tensors()[i].values().iter().map(|v| *v as f64).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `v · M` for row-major `M` with `v.len()` rows.
fn vec_mat(v: &[f64], m: &[f64]) -> Vec<f64> {
    let cols = m.len() / v.len();
    (0..cols).map(|j| (0..v.len()).map(|i| v[i] * m[i * cols + j]).sum()).collect()
}

fn add3(a: &[f64], b: &[f64], c: &[f64]) -> Vec<f64> {
    a.iter().zip(b).zip(c).map(|((a, b), c)| a + b + c).collect()
}

fn apply_mask(v: &[f64], mask: &[f32], rate: f64) -> Vec<f64> {
    v.iter().zip(mask).map(|(v, m)| v * *m as f64 / (1.0 - rate)).collect()
}

/// One step of the reference GRU stack. `train` selects whether the plan's
/// masks are applied.
fn oracle_step(
    params: &ModelParams,
    x: usize,
    z: usize,
    hidden: &[Vec<f64>],
    plan: &DropoutPlan,
    position: usize,
    train: bool,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let c = params.config;
    let xe = &tensor(params, "x_embedding")[x * c.x_embed..(x + 1) * c.x_embed];
    let ze_all = tensor(params, "z_embedding");
    let ze = &ze_all[z * c.z_embed..(z + 1) * c.z_embed];
    let mut input: Vec<f64> = xe.iter().chain(ze).copied().collect();
    if train {
        input = apply_mask(&input, plan.embed_mask(), c.embed_dropout);
    }
    let mut new_hidden = Vec::new();
    for (l, h) in hidden.iter().enumerate() {
        let w = |g: &str| tensor(params, &format!("gru{l}.{g}"));
        let zg: Vec<f64> = add3(&vec_mat(&input, &w("w_update")), &vec_mat(h, &w("u_update")), &w("b_update"))
            .into_iter()
            .map(sigmoid)
            .collect();
        let r: Vec<f64> = add3(&vec_mat(&input, &w("w_reset")), &vec_mat(h, &w("u_reset")), &w("b_reset"))
            .into_iter()
            .map(sigmoid)
            .collect();
        let rh: Vec<f64> = r.iter().zip(h).map(|(r, h)| r * h).collect();
        let cand: Vec<f64> = add3(&vec_mat(&input, &w("w_candidate")), &vec_mat(&rh, &w("u_candidate")), &w("b_candidate"))
            .into_iter()
            .map(f64::tanh)
            .collect();
        let h_new: Vec<f64> = (0..c.hidden)
            .map(|j| (1.0 - zg[j]) * h[j] + zg[j] * cand[j])
            .collect();
        input = h_new.clone();
        if train && l + 1 < c.layers {
            input = apply_mask(&input, &plan.inter_mask(&c, l, position), c.inter_dropout);
        }
        new_hidden.push(h_new);
    }
    let mut top: Vec<f64> = input.iter().chain(ze).copied().collect();
    if train {
        top = apply_mask(&top, plan.output_mask(), c.output_dropout);
    }
    let bias = tensor(params, "output.bias");
    let logits = vec_mat(&top, &tensor(params, "output.weight"))
        .iter()
        .zip(&bias)
        .map(|(a, b)| a + b)
        .collect();
    (logits, new_hidden)
}

/// Toy parameters with every tensor (biases included) randomised, so no
/// term of the cell is trivially zero.
fn toy_params(seed: u64) -> ModelParams {
    let mut params = ModelParams::init(ModelConfig::toy(), StreamSet::FULL, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for t in params.tensors_mut() {
        for v in t.values_mut() {
            *v = rng.random_range(-0.8..0.8);
        }
    }
    params
}

fn compare_against_oracle(train: bool) {
    let params = toy_params(1);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let plan = if train {
        DropoutPlan::sample(&params.config, &mut rng)
    } else {
        DropoutPlan::eval()
    };
    let mut hidden = HiddenState::zeros(&params.config);
    let mut reference: Vec<Vec<f64>> = vec![vec![0.0; 8]; 3];
    let inputs = [(50, 0), (30, 0), (10, 3), (96, 79), (97, 0), (0, 12)];
    for (position, (x, z)) in inputs.into_iter().enumerate() {
        let (logits, next) = step(&params, x, z, &hidden, &plan, position).unwrap();
        let (want, next_ref) = oracle_step(&params, x, z, &reference, &plan, position, train);
        for (a, b) in logits.iter().zip(&want) {
            assert!((*a as f64 - b).abs() < 1e-5, "position {position}: {a} vs {b}");
        }
        for (layer, (a, b)) in next.layers.iter().zip(&next_ref).enumerate() {
            for (a, b) in a.iter().zip(b) {
                assert!((*a as f64 - b).abs() < 1e-5, "hidden {layer} at {position}");
            }
        }
        hidden = next;
        reference = next_ref;
    }
}

#[test]
fn eval_step_matches_reference_gru() {
    compare_against_oracle(false);
}

#[test]
fn train_step_matches_reference_gru_with_masks() {
    compare_against_oracle(true);
}

#[test]
fn full_size_parameter_count() {
    // 98·256 + 80·32 + 3·(288·256 + 256·256 + 256)
    // + 2·3·(256·256 + 256·256 + 256) + 288·98 + 98
    assert_eq!(ModelConfig::tonicnet().param_count(), 1_262_498);
    let params = ModelParams::init(ModelConfig::tonicnet(), StreamSet::FULL, 0);
    assert_eq!(params.param_count(), 1_262_498);
    let shapes: Vec<Vec<usize>> = params.tensors().iter().map(|t| t.shape().to_vec()).collect();
    assert_eq!(shapes[0], vec![98, 256]);
    assert_eq!(shapes[1], vec![80, 32]);
    assert_eq!(shapes[2], vec![288, 256]);
    assert_eq!(shapes[11], vec![256, 256]);
    assert_eq!(shapes.last().unwrap(), &vec![98]);
}

#[test]
fn untrained_uniform_model_scores_ln_98() {
    let mut params = ModelParams::init(ModelConfig::toy(), StreamSet::FULL, 0);
    let out = params.names().iter().position(|n| n == "output.weight").unwrap();
    params.tensors_mut()[out].values_mut().fill(0.0);
    let piece = Piece {
        id: "train-000".into(),
        split: Split::Train,
        steps: vec![TimeStep::new([Some(60), Some(55), Some(52), Some(48)]); 3],
    };
    let loss = tonicnet::model::sequence_nll(&params, &encode(&piece), &DropoutPlan::eval()).unwrap();
    for l in &loss.per_position {
        assert!((*l as f64 - 98f64.ln()).abs() < 1e-5);
    }
}

#[test]
fn toy_checkpoint_size_is_header_plus_payload() {
    let params = ModelParams::init(ModelConfig::toy(), StreamSet::FULL, 0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.ckpt");
    params.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let manifest_len = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    assert_eq!(
        bytes.len(),
        CHECKPOINT_FIXED_HEADER + manifest_len + 4 * params.param_count()
    );
    assert_eq!(ModelParams::load(&path).unwrap(), params);
}

fn unwrap_autodiff(e: ModelError) -> AutodiffError {
    match e {
        ModelError::Autodiff(e) => e,
        other => panic!("unexpected model error {other}"),
    }
}

/// Cross-entropy of one step plus a fixed linear read-out of every new
/// hidden state, as a function of all parameters and the incoming state.
struct ToyStep {
    config: ModelConfig,
    plan: DropoutPlan,
    readout: Vec<Vec<f64>>,
}

impl DiffFn for ToyStep {
    fn eval<T: Element>(&self, g: &mut Graph<'_, T>, inputs: &[Var]) -> Result<Var, AutodiffError> {
        let n = inputs.len() - self.config.layers;
        let bound = BoundParams::from_vars(inputs[..n].to_vec());
        let (logits, hidden) =
            forward_step(g, &bound, &self.config, 41, 7, &inputs[n..], &self.plan, 2).map_err(unwrap_autodiff)?;
        let mut terms = vec![g.softmax_cross_entropy(logits, 60)?];
        for (h, weights) in hidden.iter().zip(&self.readout) {
            let w = g.constant(Tensor::new(vec![1, weights.len()], weights.iter().map(|v| T::of(*v)).collect())?);
            let prod = g.mul(*h, w)?;
            terms.push(g.sum(prod));
        }
        let mean = g.mean(&terms)?;
        Ok(mean)
    }
}

#[test]
fn gradient_check_of_full_toy_step() {
    let params = toy_params(2);
    let config = params.config;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let plan = DropoutPlan::sample(&config, &mut rng);
    let mut inputs: Vec<Tensor> = params.tensors().to_vec();
    for _ in 0..config.layers {
        let h: Vec<f32> = (0..config.hidden).map(|_| rng.random_range(-0.9..0.9)).collect();
        inputs.push(Tensor::row(h).with_grad());
    }
    let f = ToyStep {
        config,
        plan,
        readout: (0..config.layers)
            .map(|_| (0..config.hidden).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect(),
    };
    let report = grad_check(&f, &inputs, 1e-6).unwrap();
    assert!(report.checked > 3000, "{}", report.checked);
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

struct ToySequence {
    config: ModelConfig,
    plan: DropoutPlan,
    seq: tonicnet::encoder::EncodedSequence,
}

impl DiffFn for ToySequence {
    fn eval<T: Element>(&self, g: &mut Graph<'_, T>, _inputs: &[Var]) -> Result<Var, AutodiffError> {
        let (total, _, _) = record_sequence(g, &self.config, &self.seq, &self.plan).map_err(unwrap_autodiff)?;
        Ok(total)
    }
}

#[test]
fn gradient_check_through_time() {
    let params = toy_params(3);
    let piece = Piece {
        id: "train-000".into(),
        split: Split::Train,
        steps: vec![
            TimeStep::new([Some(72), Some(67), Some(64), Some(48)]),
            TimeStep::new([Some(72), Some(65), None, Some(50)]),
        ],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f = ToySequence {
        config: params.config,
        plan: DropoutPlan::sample(&params.config, &mut rng),
        seq: encode(&piece),
    };
    let report = grad_check(&f, params.tensors(), 1e-6).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}
