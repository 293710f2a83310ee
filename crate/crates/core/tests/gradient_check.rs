//! Analytic gradients against central finite differences, through the
//! heads, pooling and the toy encoder.

use clarity_core::chunking::{chunk, ChunkSet, ChunkingConfig};
use clarity_core::dataset::{ClarityLabel, EvasionLabel, Label};
use clarity_core::encoder::EncoderConfig;
use clarity_core::model::{
    head_loss, DropoutConfig, LossConfig, LossKind, ModelConfig, Network, PoolingStrategy, TaskMode,
};
use clarity_core::tokenization::TokenSequence;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

struct Case {
    net: Network,
    chunks: ChunkSet,
    gold_c: ClarityLabel,
    gold_e: EvasionLabel,
}

fn random_case(rng: &mut ChaCha8Rng) -> Case {
    let vocab = rng.gen_range(6..14);
    let width = rng.gen_range(2..=8);
    let window = rng.gen_range(2..=16);
    let stride = rng.gen_range(1..=window);
    let cfg = EncoderConfig {
        width,
        max_positions: window,
    };
    let mut net = Network::init(vocab, &cfg, rng);
    // Larger weights than the default init so every term matters.
    for t in net.tensors_mut() {
        for x in t.iter_mut() {
            *x = rng.gen_range(-1.0..1.0);
        }
    }
    let len = rng.gen_range(1..3 * window + 2);
    let seq = TokenSequence {
        id: "g".into(),
        ids: (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect(),
    };
    let chunks = chunk(&seq, &ChunkingConfig::new(window, stride).unwrap(), 0);
    Case {
        net,
        chunks,
        gold_c: ClarityLabel::ALL[rng.gen_range(0..3)],
        gold_e: EvasionLabel::ALL[rng.gen_range(0..9)],
    }
}

fn loss_value(case: &Case, net: &Network, model: &ModelConfig, loss: &LossConfig) -> f64 {
    let mut scratch = net.zeros_like();
    net.accumulate_gradients(
        &case.chunks,
        case.gold_c,
        case.gold_e,
        model,
        &DropoutConfig::eval(),
        loss,
        1.0,
        &mut ChaCha8Rng::seed_from_u64(0),
        &mut scratch,
    )
    .unwrap()
    .total
}

fn check(case: &Case, model: &ModelConfig, loss: &LossConfig) -> f64 {
    let mut grads = case.net.zeros_like();
    case.net
        .accumulate_gradients(
            &case.chunks,
            case.gold_c,
            case.gold_e,
            model,
            &DropoutConfig::eval(),
            loss,
            1.0,
            &mut ChaCha8Rng::seed_from_u64(0),
            &mut grads,
        )
        .unwrap();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
    let mut worst = 0.0f64;
    let mut net = case.net.clone();
    for (ti, tensor) in analytic.iter().enumerate() {
        for (i, &a) in tensor.iter().enumerate() {
            let orig = net.tensors()[ti][i];
            net.tensors_mut()[ti][i] = orig + STEP;
            let up = loss_value(case, &net, model, loss);
            net.tensors_mut()[ti][i] = orig - STEP;
            let down = loss_value(case, &net, model, loss);
            net.tensors_mut()[ti][i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    worst
}

#[test]
fn all_losses_and_poolings_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let losses = [
        LossConfig::default(),
        LossConfig {
            kind: LossKind::ClassWeighted,
            clarity_weights: Some(vec![0.5, 2.0, 1.25]),
            evasion_weights: Some((1..=9).map(|x| x as f64 / 3.0).collect()),
            ..LossConfig::default()
        },
        LossConfig {
            kind: LossKind::Focal,
            focal_gamma: 2.0,
            ..LossConfig::default()
        },
        LossConfig {
            kind: LossKind::Focal,
            focal_gamma: 0.5,
            tasks: TaskMode::EvasionOnly,
            ..LossConfig::default()
        },
    ];
    for round in 0..12 {
        let case = random_case(&mut rng);
        for pooling in PoolingStrategy::ALL {
            let model = ModelConfig {
                pooling,
                dropout: 0.0,
            };
            let loss = &losses[round % losses.len()];
            let worst = check(&case, &model, loss);
            assert!(
                worst < TOLERANCE,
                "round {round} {pooling:?} {:?}: rel err {worst:e}",
                loss.kind
            );
        }
    }
}

#[test]
fn head_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let k = if rng.gen_bool(0.5) { 3 } else { 9 };
        let z: Vec<f64> = (0..k).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let gold = rng.gen_range(0..k);
        let kind = [LossKind::CrossEntropy, LossKind::ClassWeighted, LossKind::Focal][rng.gen_range(0..3)];
        let gamma = rng.gen_range(0.0..3.0);
        let weight = rng.gen_range(0.2..3.0);
        let (_, grad) = head_loss(&z, gold, kind, gamma, weight);
        for j in 0..k {
            let mut up = z.clone();
            up[j] += STEP;
            let mut down = z.clone();
            down[j] -= STEP;
            let numeric = (head_loss(&up, gold, kind, gamma, weight).0
                - head_loss(&down, gold, kind, gamma, weight).0)
                / (2.0 * STEP);
            assert!(rel_err(grad[j], numeric) < TOLERANCE, "{kind:?} j={j}");
        }
    }
}

#[test]
fn pooled_vector_gradient_is_sum_of_head_terms() {
    // Perturb the pooled vector directly: with a single chunk and FirstChunk
    // pooling, dL/dv is exactly what flows into the encoder's row 0.
    use clarity_core::model::{forward, heads_backward, loss, HeadParams};
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let heads = HeadParams::init(6, &mut rng);
    let v: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let cfg = LossConfig::default();
    let eval = DropoutConfig::eval();
    let total = |v: &[f64]| {
        let out = forward(v, &heads, &eval, &mut rng.clone());
        loss(&out.clarity_logits, &out.evasion_logits, ClarityLabel::ClearReply, EvasionLabel::Deflection, &cfg).total
    };
    let out = forward(&v, &heads, &eval, &mut rng.clone());
    let l = loss(&out.clarity_logits, &out.evasion_logits, ClarityLabel::ClearReply, EvasionLabel::Deflection, &cfg);
    let mut scratch = HeadParams::zeros(6);
    let gv = heads_backward(&heads, &out, &l.grad_clarity, &l.grad_evasion, &mut scratch);

    let mut only_c = HeadParams::zeros(6);
    let gc = heads_backward(&heads, &out, &l.grad_clarity, &[0.0; 9], &mut only_c);
    let mut only_e = HeadParams::zeros(6);
    let ge = heads_backward(&heads, &out, &[0.0; 3], &l.grad_evasion, &mut only_e);
    for j in 0..6 {
        assert!((gv[j] - (gc[j] + ge[j])).abs() < 1e-15);
        let mut up = v.clone();
        up[j] += STEP;
        let mut down = v.clone();
        down[j] -= STEP;
        let numeric = (total(&up) - total(&down)) / (2.0 * STEP);
        assert!(rel_err(gv[j], numeric) < TOLERANCE);
    }
}
