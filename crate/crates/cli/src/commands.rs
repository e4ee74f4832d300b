use std::collections::HashMap;
use std::path::{Path, PathBuf};

use drivelang::driving_language::container::{write_sequence, Manifest, SequenceRecord};
use drivelang::driving_language::{serialize_with, DrivingSequence, TokenStream};
use drivelang::evaluator::{
    ablate_copy, baseline_constant_velocity, evaluate_planner, format_table, Component, EvalCase, EvalReport,
};
use drivelang::geometry::RelativeAction;
use drivelang::model::checkpoint::{load_log, log_path, save_log, Checkpoint, LanguageInfo};
use drivelang::model::{init, ModelParams};
use drivelang::obs_tokenizer::TokenGrid;
use drivelang::pipeline::Tokenizers;
use drivelang::sampler::{long_rollout, SamplerConfig};
use drivelang::train::train;
use drivelang::world_sim::{build_dataset, frame_stride, sequence_seed, write_dataset, Scenario};
use serde_json::json;

use crate::artifacts::*;
use crate::config::RunConfig;
use crate::error::{CliError, Result};

/// Keeps held-out scenarios disjoint from the training seeds.
const EVAL_SEED_SALT: u64 = 0xE7A1_5EED;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Ablation {
    CopyX,
    CopyY,
    CopyTheta,
    CopyAll,
    ConstVel,
    NoActionPosemb,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::CopyX => "copy-x",
            Ablation::CopyY => "copy-y",
            Ablation::CopyTheta => "copy-theta",
            Ablation::CopyAll => "copy-all",
            Ablation::ConstVel => "const-vel",
            Ablation::NoActionPosemb => "no-action-posemb",
        }
    }

    fn components(self) -> &'static [Component] {
        match self {
            Ablation::CopyX => &[Component::X],
            Ablation::CopyY => &[Component::Y],
            Ablation::CopyTheta => &[Component::Theta],
            Ablation::CopyAll => &[Component::X, Component::Y, Component::Theta],
            _ => &[],
        }
    }
}

/// Paths written by a command, reported on stdout.
pub type Outputs = Vec<PathBuf>;

pub fn gen_data(cfg: &RunConfig, split: Split, out: &Path) -> Result<Outputs> {
    let d = &cfg.dataset;
    let (n, frames, hz, seed) = match split {
        Split::Train => (d.train_sequences, d.train_frames, d.train_hz, cfg.seeds.data),
        Split::Eval => (
            d.eval_scenarios,
            d.eval_frames,
            d.eval_hz,
            sequence_seed(cfg.seeds.data, EVAL_SEED_SALT),
        ),
    };
    let clips = build_dataset(n, frames, hz, &cfg.world_sim, seed)?;
    write_dataset(out, &clips, hz, &cfg.world_sim)?;
    let stamp = out.join(STAMP_FILE);
    write_stamp(&stamp, "gen-data", cfg, &[])?;
    Ok(vec![out.to_path_buf()])
}

pub fn fit(cfg: &RunConfig, data: &Path) -> Result<Outputs> {
    let mut m = load_manifest(data)?;
    if m.height as usize != cfg.world_sim.image_size || m.width as usize != cfg.world_sim.image_size {
        return Err(CliError::Config {
            fields: vec![format!(
                "world_sim.image_size: dataset frames are {}x{}",
                m.height, m.width
            )],
        });
    }
    let raw = load_raw(data, &m)?;
    let images: Vec<_> = raw.iter().flat_map(|r| r.images.iter().cloned()).collect();
    let actions: Vec<_> = raw.iter().flat_map(|r| r.actions.iter().copied()).collect();
    let tc = cfg.tokenizer_config();
    let tok = Tokenizers::fit(&images, &actions, &tc)?;
    tok.codec.save(&data.join(CODEC_FILE), tc.lo_pct, tc.hi_pct)?;
    tok.codebook.save(&data.join(CODEBOOK_FILE))?;
    let tpf = tok.tokens_per_frame(m.height as usize, m.width as usize);
    for (entry, rec) in m.sequences.iter_mut().zip(&raw) {
        let seq = tok.sequence(&rec.images, &rec.actions)?;
        let stream = tok.stream(&seq, cfg.model.positions)?;
        let name = format!("{}.dgsq", entry.name);
        write_sequence(
            &data.join(&name),
            &SequenceRecord {
                tokens_per_frame: tpf,
                ids: stream.ids,
                actions: rec.actions.clone(),
            },
        )?;
        entry.tokens = Some(name);
    }
    m.image_vocab = Some(tc.image_vocab as u32);
    m.action_bins = Some(tc.action_bins as u32);
    m.patch = Some(tc.patch as u32);
    m.codec = Some(CODEC_FILE.into());
    m.codebook = Some(CODEBOOK_FILE.into());
    m.save(data)?;
    write_stamp(&data.join("fit.stamp.json"), "fit", cfg, &[&data.join(CODEC_FILE), &data.join(CODEBOOK_FILE)])?;
    Ok(vec![data.join(CODEC_FILE), data.join(CODEBOOK_FILE)])
}

fn check_language(cfg: &RunConfig, lang: &LanguageInfo) -> Result<()> {
    let vocab = lang.layout().total() as usize;
    let mut bad = Vec::new();
    if cfg.model.vocab != vocab {
        bad.push(format!("model.vocab: dataset vocabulary is {vocab}"));
    }
    if cfg.tokens_per_frame() != lang.tokens_per_frame {
        bad.push(format!(
            "world_sim.image_size, tokenizer.patch: dataset has {} tokens per frame",
            lang.tokens_per_frame
        ));
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(CliError::Config { fields: bad })
    }
}

/// Token streams for training, mirrored copies appended when enabled.
fn training_corpus(cfg: &RunConfig, data: &Path) -> Result<(LanguageInfo, Vec<TokenStream>)> {
    let m = load_manifest(data)?;
    let lang = language(&m)?;
    check_language(cfg, &lang)?;
    let layout = lang.layout();
    let mut corpus = load_sequences(data, &m)?
        .iter()
        .map(|(_, s)| serialize_with(s, &layout, cfg.model.positions))
        .collect::<drivelang::Result<Vec<_>>>()?;
    if cfg.train.flip_augment {
        let tok = load_tokenizers(data)?;
        for r in load_raw(data, &m)? {
            corpus.push(tok.stream(&tok.mirrored_sequence(&r.images, &r.actions)?, cfg.model.positions)?);
        }
    }
    Ok((lang, corpus))
}

pub fn train_model(cfg: &RunConfig, data: &Path, resume: Option<&Path>, out: &Path) -> Result<Outputs> {
    let (lang, corpus) = training_corpus(cfg, data)?;
    let (params, state, mut log) = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.params.config.positions != cfg.model.positions || ck.language != lang {
                return Err(CliError::Usage("resumed checkpoint does not match the dataset or config".into()));
            }
            let log = load_log(&log_path(p)).unwrap_or_default();
            (ck.params, ck.optimizer.map(|(_, s)| s), log)
        }
        None => (init::<f32>(&cfg.model)?, None, Vec::new()),
    };
    let outcome = train(params, state, &corpus, &cfg.train.run, |e| {
        if let Some(l) = e.eval_loss {
            eprintln!("step {} loss {:.4} eval {:.4} grad-norm {:.3}", e.iteration, e.loss, l, e.grad_norm);
        }
    })?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    Checkpoint {
        params: outcome.params,
        language: lang,
        optimizer: Some((cfg.train.run.optimizer, outcome.optimizer)),
    }
    .save(out)?;
    log.extend(outcome.log);
    save_log(&log_path(out), &log)?;
    write_stamp(&stamp_beside(out), "train", cfg, &[&Manifest::path(data), out])?;
    eprintln!(
        "final loss {:.4}, target {}",
        outcome.final_loss,
        if outcome.reached_target { "reached" } else { "not reached" }
    );
    Ok(vec![out.to_path_buf(), log_path(out)])
}

fn load_model(path: &Path) -> Result<(ModelParams<f32>, LanguageInfo)> {
    let ck = Checkpoint::load(path)?;
    Ok((ck.params, ck.language))
}

pub struct GenerateArgs<'a> {
    pub checkpoint: &'a Path,
    pub data: &'a Path,
    pub sequence: usize,
    pub seed_frames: usize,
    pub total_frames: usize,
    pub dump_frames: bool,
}

pub fn generate(cfg: &RunConfig, a: &GenerateArgs<'_>, out: &Path) -> Result<Outputs> {
    let (params, lang) = load_model(a.checkpoint)?;
    let tok = load_tokenizers(a.data)?;
    let m = load_manifest(a.data)?;
    let seqs = load_sequences(a.data, &m)?;
    let (_, seq) = seqs
        .get(a.sequence)
        .ok_or_else(|| CliError::Usage(format!("dataset has {} sequences", seqs.len())))?;
    if a.seed_frames == 0 || a.seed_frames > seq.len() {
        return Err(CliError::Usage(format!("seed frames must be in 1..={}", seq.len())));
    }
    let seed = seq.slice(0, a.seed_frames);
    let rc = drivelang::sampler::RolloutConfig {
        total_frames: a.total_frames,
        ..cfg.rollout
    };
    let generated = long_rollout(&params, &lang, &seed, &rc, &cfg.sampler)?;
    create_dir(out)?;

    let all = DrivingSequence::new(seed.frames.iter().chain(&generated.frames).cloned().collect())?;
    let stream = serialize_with(&all, &lang.layout(), params.config.positions)?;
    let actions = all
        .frames
        .iter()
        .map(|f| tok.codec.decode_action(f.action))
        .collect::<drivelang::Result<Vec<RelativeAction>>>()?;
    let tokens = out.join("rollout.dgsq");
    write_sequence(
        &tokens,
        &SequenceRecord {
            tokens_per_frame: lang.tokens_per_frame,
            ids: stream.ids,
            actions,
        },
    )?;
    let cols = lang.image_tokens() / lang.grid_rows;
    let images = generated
        .frames
        .iter()
        .map(|f| tok.codebook.decode(&TokenGrid::new(lang.grid_rows, cols, f.image.clone())?))
        .collect::<drivelang::Result<Vec<_>>>()?;
    let strip = out.join("strip.ppm");
    write_strip(&strip, &images)?;
    let mut outputs = vec![tokens, strip];
    if a.dump_frames {
        let dir = out.join("frames");
        create_dir(&dir)?;
        for (i, img) in images.iter().enumerate() {
            let p = dir.join(format!("frame_{i:04}.ppm"));
            write_strip(&p, std::slice::from_ref(img))?;
        }
        outputs.push(dir);
    }
    write_stamp(&out.join(STAMP_FILE), "generate", cfg, &[a.checkpoint])?;
    Ok(outputs)
}

pub fn plan_scenario(cfg: &RunConfig, checkpoint: &Path, data: &Path, scenario: &Path, out: &Path) -> Result<Outputs> {
    let (params, lang) = load_model(checkpoint)?;
    let tok = load_tokenizers(data)?;
    let stride = frame_stride(&cfg.world_sim, cfg.dataset.eval_hz)?;
    let case = case_from_scenario(Scenario::load(scenario)?, cfg.dataset.eval_frames, stride, &cfg.world_sim, cfg)?;
    let p = tok.plan_case(&params, &lang, &case, cfg.evaluator.horizon, &cfg.planner)?;
    let scores = case.score(&p.trajectory, &cfg.evaluator)?;
    let poses: Vec<_> = p
        .trajectory
        .poses
        .iter()
        .map(|t| json!({"x": t.x(), "y": t.y(), "theta": t.heading()}))
        .collect();
    let doc = json!({
        "scenario_seed": case.scenario.seed,
        "frame_dt": case.frame_dt,
        "actions": p.actions,
        "tokens": p.tokens.iter().map(|t| t.to_array()).collect::<Vec<_>>(),
        "poses": poses,
        "scores": scores,
        "pdms": drivelang::evaluator::pdms(&scores, cfg.evaluator.weights),
    });
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_json(out, &doc)?;
    write_stamp(&stamp_beside(out), "plan", cfg, &[checkpoint, scenario])?;
    Ok(vec![out.to_path_buf()])
}

type Plans = HashMap<u64, std::result::Result<Vec<RelativeAction>, String>>;

/// Model-predicted actions per scenario seed. Each case samples from its
/// own stream so parallelism cannot change any single plan.
fn predict(cfg: &RunConfig, params: &ModelParams<f32>, lang: &LanguageInfo, tok: &Tokenizers, cases: &[EvalCase]) -> Plans {
    use rayon::prelude::*;
    cases
        .par_iter()
        .map(|c| {
            let sc = SamplerConfig {
                seed: sequence_seed(cfg.planner.seed, c.scenario.seed),
                ..cfg.planner
            };
            let r = tok
                .plan_case(params, lang, c, cfg.evaluator.horizon, &sc)
                .map(|p| p.actions)
                .map_err(|e| e.to_string());
            (c.scenario.seed, r)
        })
        .collect()
}

fn report_from(name: &str, plans: &Plans, cases: &[EvalCase], cfg: &RunConfig, ablation: Option<Ablation>) -> EvalReport {
    evaluate_planner(
        name,
        |case| {
            let actions = plans[&case.scenario.seed]
                .as_ref()
                .map_err(|e| drivelang::Error::Decoding(e.clone()))?;
            match ablation {
                Some(Ablation::ConstVel) => baseline_constant_velocity(&case.history_actions, cfg.evaluator.horizon),
                Some(a) => ablate_copy(a.components(), actions, &case.history_actions),
                None => drivelang::geometry::integrate(actions),
            }
        },
        cases,
        &cfg.evaluator,
    )
}

fn write_reports(out: &Path, stem: &str, reports: &[EvalReport]) -> Result<Outputs> {
    create_dir(out)?;
    let json_path = out.join(format!("{stem}.json"));
    let txt_path = out.join(format!("{stem}.txt"));
    write_json(&json_path, &reports)?;
    std::fs::write(&txt_path, format_table(reports)).map_err(|e| CliError::io(&txt_path, e))?;
    print!("{}", format_table(reports));
    Ok(vec![json_path, txt_path])
}

pub fn evaluate(cfg: &RunConfig, checkpoint: &Path, data: &Path, scenarios: &Path, out: &Path) -> Result<Outputs> {
    let (params, lang) = load_model(checkpoint)?;
    let tok = load_tokenizers(data)?;
    let cases = load_cases(scenarios, cfg)?;
    let plans = predict(cfg, &params, &lang, &tok, &cases);
    let report = report_from("model", &plans, &cases, cfg, None);
    let outputs = write_reports(out, "report", &[report])?;
    write_stamp(&out.join(STAMP_FILE), "evaluate", cfg, &[checkpoint, &Manifest::path(scenarios)])?;
    Ok(outputs)
}

pub struct AblateArgs<'a> {
    pub checkpoint: &'a Path,
    pub data: &'a Path,
    pub scenarios: &'a Path,
    pub which: &'a [Ablation],
    /// Checkpoint trained with zeroed action positions; trained on demand if absent.
    pub variant: Option<&'a Path>,
}

pub fn ablate(cfg: &RunConfig, a: &AblateArgs<'_>, out: &Path) -> Result<Outputs> {
    let (params, lang) = load_model(a.checkpoint)?;
    let tok = load_tokenizers(a.data)?;
    let cases = load_cases(a.scenarios, cfg)?;
    let plans = predict(cfg, &params, &lang, &tok, &cases);
    let mut reports = vec![report_from("full", &plans, &cases, cfg, None)];
    let mut inputs: Vec<PathBuf> = vec![a.checkpoint.to_path_buf(), Manifest::path(a.scenarios)];
    for &w in a.which {
        let report = if w == Ablation::NoActionPosemb {
            let path = match a.variant {
                Some(p) => p.to_path_buf(),
                None => {
                    create_dir(out)?;
                    let p = out.join("no-action-posemb.ckpt");
                    train_model(&cfg.no_action_positions(), a.data, None, &p)?;
                    p
                }
            };
            let (vp, vl) = load_model(&path)?;
            inputs.push(path);
            report_from(w.name(), &predict(cfg, &vp, &vl, &tok, &cases), &cases, cfg, None)
        } else {
            report_from(w.name(), &plans, &cases, cfg, Some(w))
        };
        reports.push(report);
    }
    let outputs = write_reports(out, "ablation", &reports)?;
    let refs: Vec<&Path> = inputs.iter().map(|p| p.as_path()).collect();
    write_stamp(&out.join(STAMP_FILE), "ablate", cfg, &refs)?;
    Ok(outputs)
}
