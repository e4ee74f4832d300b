use drivelang::action_codec::{ActionCodec, ActionTokens, ComponentBounds};
use drivelang::driving_language::{deserialize, serialize_with, DrivingSequence, Frame, PositionScheme, TokenStream};
use drivelang::geometry::{pose_from_action, RelativeAction};
use drivelang::model::checkpoint::LanguageInfo;
use drivelang::model::{init, AdamWConfig, ModelConfig, ModelParams};
use drivelang::sampler::{generate_frame, long_rollout, plan, RolloutConfig, SamplerConfig};
use drivelang::train::{train, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const LANG: LanguageInfo = LanguageInfo {
    image_vocab: 6,
    action_bins: 4,
    tokens_per_frame: 7,
    grid_rows: 2,
};

fn config(frames: usize) -> ModelConfig {
    ModelConfig {
        vocab: 18,
        context: frames * 7,
        layers: 2,
        width: 32,
        heads: 2,
        ffn_hidden: 88,
        token_dropout: 0.0,
        seed: 4,
        rope_base: 10_000.0,
        positions: PositionScheme::FrameWise,
        frame_slots: 0,
    }
}

fn frame(img: [u32; 4], act: [u32; 3]) -> Frame {
    Frame {
        image: img.to_vec(),
        action: ActionTokens::from_array(act),
    }
}

fn seq(frames: Vec<Frame>) -> DrivingSequence {
    DrivingSequence::new(frames).unwrap()
}

fn stream(s: &DrivingSequence) -> TokenStream {
    serialize_with(s, &LANG.layout(), PositionScheme::FrameWise).unwrap()
}

fn overfit(corpus: &[TokenStream], frames: usize, steps: u64) -> ModelParams<f32> {
    let cfg = TrainConfig {
        max_steps: steps,
        batch_size: corpus.len().min(4),
        optimizer: AdamWConfig {
            lr: 3e-3,
            ..Default::default()
        },
        eval_every: 50,
        target_loss: Some(0.01),
        seed: 0,
        parallel: true,
    };
    train(init(&config(frames)).unwrap(), None, corpus, &cfg, |_| {})
        .unwrap()
        .params
}

#[test]
fn generated_frames_always_parse() {
    let params = init::<f32>(&config(8)).unwrap();
    let ctx = seq(vec![frame([0, 1, 2, 3], [0, 1, 2]); 3]);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..30 {
        let (grid, act) = generate_frame(&params, &LANG, &ctx, &SamplerConfig::default(), &mut rng).unwrap();
        assert_eq!(grid.len() + 3, LANG.tokens_per_frame);
        let f = Frame {
            image: grid.tokens.clone(),
            action: act,
        };
        let mut all = ctx.clone();
        all.frames.push(f);
        assert!(deserialize(&stream(&all).ids, &LANG.layout(), 7).is_ok());
    }
}

#[test]
fn context_overflow_rejected() {
    let params = init::<f32>(&config(3)).unwrap();
    let ctx = seq(vec![frame([0, 1, 2, 3], [0, 1, 2]); 3]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(generate_frame(&params, &LANG, &ctx, &SamplerConfig::default(), &mut rng).is_err());
    let rc = RolloutConfig {
        window_generate: 2,
        window_condition: 2,
        total_frames: 4,
    };
    assert!(long_rollout(&params, &LANG, &ctx, &rc, &SamplerConfig::default()).is_err());
}

#[test]
fn single_chunk_rollout_equals_chained_frames() {
    let params = init::<f32>(&config(8)).unwrap();
    let seeds = seq((0..4).map(|i| frame([i, i + 1, 2, 3], [i % 4, 1, 2])).collect());
    let sc = SamplerConfig {
        seed: 21,
        ..Default::default()
    };
    let rc = RolloutConfig {
        window_generate: 4,
        window_condition: 3,
        total_frames: 4,
    };
    let rolled = long_rollout(&params, &LANG, &seeds, &rc, &sc).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut ctx = seeds.slice(1, 4);
    for want in &rolled.frames {
        let (grid, act) = generate_frame(&params, &LANG, &ctx, &sc, &mut rng).unwrap();
        assert_eq!(&grid.tokens, &want.image);
        assert_eq!(act, want.action);
        ctx.frames.push(want.clone());
    }
}

#[test]
fn multi_chunk_rollout_is_deterministic() {
    let params = init::<f32>(&config(6)).unwrap();
    let seeds = seq(vec![frame([5, 4, 3, 2], [3, 2, 1]); 3]);
    let rc = RolloutConfig {
        window_generate: 3,
        window_condition: 3,
        total_frames: 10,
    };
    let sc = SamplerConfig {
        seed: 3,
        ..Default::default()
    };
    let a = long_rollout(&params, &LANG, &seeds, &rc, &sc).unwrap();
    assert_eq!(a.len(), 10);
    assert_eq!(a, long_rollout(&params, &LANG, &seeds, &rc, &sc).unwrap());
    let other = SamplerConfig { seed: 4, ..sc };
    assert_ne!(a, long_rollout(&params, &LANG, &seeds, &rc, &other).unwrap());
}

#[test]
fn overfit_repeated_frame_regenerates_it() {
    let f = frame([4, 1, 5, 0], [2, 3, 1]);
    let s = seq(vec![f.clone(); 4]);
    let params = overfit(&[stream(&s)], 4, 400);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (grid, act) = generate_frame(&params, &LANG, &s.slice(0, 2), &SamplerConfig::greedy(), &mut rng).unwrap();
    assert_eq!(grid.tokens, f.image);
    assert_eq!(act, f.action);
}

fn codec() -> ActionCodec {
    ActionCodec::new(
        ComponentBounds::new(0.0, 3.0).unwrap(),
        ComponentBounds::new(-1.0, 1.0).unwrap(),
        ComponentBounds::new(-0.3, 0.3).unwrap(),
        4,
    )
    .unwrap()
}

#[test]
fn plan_follows_constant_velocity_corpus() {
    let c = codec();
    let d = 2.0;
    let a = c.encode_action(RelativeAction::new(d, 0.0, 0.0));
    // the image drifts one code per frame so frames are distinguishable
    let corpus: Vec<TokenStream> = (0..3)
        .map(|o| {
            stream(&seq((0..8)
                .map(|i| {
                    let k = (i + o) % 6;
                    frame([k, (k + 1) % 6, 2, 3], a.to_array())
                })
                .collect()))
        })
        .collect();
    let params = overfit(&corpus, 8, 600);
    let history = seq((0..4).map(|k| frame([k, k + 1, 2, 3], a.to_array())).collect());
    let p = plan(&params, &LANG, &c, &history, 5, &SamplerConfig::greedy()).unwrap();
    let bin = c.bounds()[0].bin_width(4);
    for (k, pose) in p.trajectory.poses.iter().enumerate() {
        let want = (k + 1) as f64 * d;
        assert!((pose.x() - want).abs() <= bin * (k + 1) as f64, "step {k}: {}", pose.x());
        assert!(pose.y().abs() < 1e-9);
    }
    assert_eq!(p, plan(&params, &LANG, &c, &history, 5, &SamplerConfig::greedy()).unwrap());

    let one = plan(&params, &LANG, &c, &history, 1, &SamplerConfig::greedy()).unwrap();
    assert_eq!(one.trajectory.poses, vec![pose_from_action(one.actions[0]).unwrap()]);
}
