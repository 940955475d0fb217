use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use umm_core::datagen::{build_corpus, Corpus};
use umm_core::diffusion::{diffusion_loss, draw_noise, make_schedule, Denoiser};
use umm_core::numerics::{adam_step, AdamConfig, AdamState, Graph, ParameterStore, Tensor};
use umm_core::trainer::{prepare_samples, run_phase, Phase, RunConfig, TrainConfig, TrainedModel};

/// Training on two samples drives the loss down.
#[test]
fn overfits_a_two_sample_set() {
    let run = RunConfig::smoke();
    let dir = tempfile::tempdir().unwrap();
    build_corpus(run.data.candidates, &run.data.grammar, &run.data.policy, 1, dir.path()).unwrap();
    let corpus = Corpus::load(dir.path()).unwrap();
    let model = TrainedModel::new_model(&run.model, &corpus.vocab, &corpus.grammar).unwrap();
    let data = prepare_samples(&model, &corpus.vocab, &corpus.grammar, &corpus.samples[..2]).unwrap();
    let cfg = TrainConfig {
        iterations: 500,
        batch_size: 2,
        lr: 2e-3,
        cond_probs: [0.0, 0.0, 1.0],
        log_every: 100,
        ..TrainConfig::default()
    };
    let (_, _, log) = run_phase(&model, model.init_params(0).unwrap(), &data, Phase::Pretrain, &cfg, 0, None).unwrap();
    let (head, tail) = log.head_tail(50);
    assert!(tail < 0.5 * head, "loss {head} -> {tail}");
}

/// With data drawn from N(μ, σ²I) the optimal noise prediction is
/// E[ε | x_t] = √(1−ᾱ)(x_t − √ᾱ μ) / (σ²ᾱ + 1 − ᾱ). An unconditional
/// denoiser trained on such data should approach it.
#[test]
fn denoiser_learns_the_gaussian_optimum() {
    let (mu, sigma) = (0.5f64, 0.5f64);
    let size = 8;
    let schedule = make_schedule(100, 1e-4, 0.02).unwrap();
    let net = Denoiser {
        image_size: size,
        channels: 8,
        heads: 2,
        cond_dim: 8,
        cond_len: 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ps = ParameterStore::<f32>::new();
    net.init_params(&mut ps, &mut rng).unwrap();
    let mut adam = AdamState::new(AdamConfig {
        lr: 3e-3,
        ..AdamConfig::default()
    });
    let n = 16;
    let pixels = size * size;
    let data = |rng: &mut ChaCha8Rng| {
        let z = Tensor::<f32>::randn(&[n * pixels, 3], rng);
        Tensor::new(z.shape().to_vec(), z.data().iter().map(|v| (mu + sigma * *v as f64) as f32).collect()).unwrap()
    };
    for _ in 0..1500 {
        let x0 = data(&mut rng);
        let mut g = Graph::new();
        let loss = diffusion_loss(&mut g, &schedule, &x0, n, &mut rng, |g, x, t, _| {
            let c = net.null_condition(g, &ps, n)?;
            net.forward(g, &ps, x, t, c)
        })
        .unwrap();
        let grads = g.backward(loss).unwrap().into_params();
        adam_step(&mut ps, &grads, &mut adam).unwrap();
    }

    let (mut dev, mut var) = (0.0, 0.0);
    for _ in 0..8 {
        let x0 = data(&mut rng);
        let draw = draw_noise(&schedule, &x0, n, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(draw.x_t.clone());
        let c = net.null_condition(&mut g, &ps, n).unwrap();
        let out = net.forward(&mut g, &ps, x, &draw.t, c).unwrap();
        let pred = g.value(out).data().to_vec();
        for b in 0..n {
            let ab = schedule.alpha_bar(draw.t[b]).unwrap();
            let gain = (1.0 - ab).sqrt() / (sigma * sigma * ab + 1.0 - ab);
            for i in b * pixels * 3..(b + 1) * pixels * 3 {
                let star = gain * (draw.x_t.data()[i] as f64 - ab.sqrt() * mu);
                dev += (pred[i] as f64 - star).powi(2);
                var += star * star;
            }
        }
    }
    let ratio = dev / var;
    assert!(ratio < 0.1, "mean squared deviation is {ratio:.3} of the optimum's second moment");
}
