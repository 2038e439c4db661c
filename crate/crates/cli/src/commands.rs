use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};
use latedit_core::codec::uniform_viewpoints;
use latedit_core::container::{load_latent, save_latent};
use latedit_core::eval::{evaluate, EvalContext, EvalSetFile};
use latedit_core::export::{rgb_png, write_png};
use latedit_core::toy_task::{ShiftTask, ShiftTaskConfig};
use latedit_core::trainer::{
    load_training_state, test_time_optimize, train, DatasetManifest, PriorSpec, TrainOutputs, TtoConfig,
};
use latedit_core::{
    apply_edit_vector, extract_edit_vector, scale_edit, sequential_edit, Config, EditInstruction, EditVector,
    LatentEditor, ToyEditor,
};
use latedit_service::{Service, SessionStore, ToyTextSampler, TurntableSettings};
use ndarray::{s, Array3};

use crate::models::{load_backbone, load_editor, load_embedder, CodecChoice};
use crate::{Command, LatentOp, ModelArgs};

fn load_config(args: &ModelArgs) -> Result<Config> {
    Ok(Config::load_with_env(args.config.as_deref())?)
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string(v)?);
    Ok(())
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenToy {
            out,
            train,
            held_out,
            seed,
        } => {
            let task = ShiftTask::new(ShiftTaskConfig {
                train_latents: train,
                held_out_latents: held_out,
                seed,
                ..ShiftTaskConfig::default()
            })?;
            task.write_data_dir(&out)?;
            eprintln!("wrote {} training and {} held-out latents to {}", train, held_out, out.display());
            Ok(())
        }
        Command::Train {
            model,
            data,
            out,
            prompt,
            prompt_file,
            resume,
        } => train_cmd(&model, &data, &out, prompt, prompt_file.as_deref(), resume.as_deref()),
        Command::OptimizeLatent {
            model,
            latent,
            prompt,
            target,
            token,
            priors,
            steps,
            out,
        } => {
            let cfg = load_config(&model)?;
            let codec = CodecChoice::load(&model.codec)?;
            let instruction = match (target, token) {
                (Some(t), Some(k)) => EditInstruction::local(prompt, t, k)?,
                _ => EditInstruction::global(prompt)?,
            };
            let spec = read_prior_spec(&priors)?;
            let loaded = spec.instantiate(&cfg, codec.toy().map(|c| c.as_ref()))?;
            let mut tto = TtoConfig::default();
            if let Some(n) = steps {
                tto.steps = n;
            }
            let src = load_latent(&latent)?;
            let edited = test_time_optimize(&src, &instruction, &cfg, codec.differentiable(), loaded.priors(), &tto)?;
            save_latent(&out, &edited)?;
            Ok(())
        }
        Command::Edit {
            model,
            ckpt,
            latent,
            prompt,
            eta,
            out,
        } => {
            let codec = CodecChoice::load(&model.codec)?;
            let editor = load_editor(&ckpt, codec.codec())?;
            let src = load_latent(&latent)?;
            let edited = editor.edit(&src, &prompt)?;
            save_latent(&out, &scale_edit(&src, &edited, eta)?)?;
            Ok(())
        }
        Command::LatentOp { op } => latent_op(op),
        Command::Render {
            model,
            latent,
            frames,
            res,
            out,
        } => {
            ensure!(frames > 0 && res > 0, "frames and res must be positive");
            let cfg = load_config(&model)?;
            let codec = CodecChoice::load(&model.codec)?;
            let l = load_latent(&latent)?;
            let field = codec.codec().decode(&l)?;
            let mut strip = Array3::zeros((res, res * frames, 3));
            for (i, v) in uniform_viewpoints(&cfg.camera, frames).iter().enumerate() {
                let view = codec.codec().render(&field, v, res)?;
                strip.slice_mut(s![.., i * res..(i + 1) * res, ..]).assign(&view.rgb);
            }
            write_png(&out, &rgb_png(&strip)?)?;
            Ok(())
        }
        Command::Evaluate {
            model,
            ckpt,
            eval_set,
            out,
            embedder,
            backbone,
        } => {
            let cfg = load_config(&model)?;
            let codec = CodecChoice::load(&model.codec)?;
            let editor = load_editor(&ckpt, codec.codec())?;
            let pairs = EvalSetFile::load(&eval_set, editor.instructions())?;
            let embedder = load_embedder(&embedder)?;
            let backbone = load_backbone(&backbone, cfg.eval.backbone_layer)?;
            let ctx = EvalContext {
                camera: cfg.camera,
                eval: cfg.eval.clone(),
                config_hash: cfg.hash(),
            };
            let report = evaluate(&editor, &pairs, codec.codec(), embedder.as_ref(), backbone.as_ref(), &ctx)?;
            report.write(&out)?;
            print_json(&report.aggregate)
        }
        Command::Serve {
            config,
            ckpt,
            codec,
            port,
            host,
            store,
        } => {
            let cfg = Config::load_with_env(config.as_deref())?;
            let codec = CodecChoice::load(&codec)?;
            let editor = load_editor(&ckpt, codec.codec())?;
            let mut service = Service::new(Arc::new(editor), codec.shared(), SessionStore::open(&store)?)?
                .with_camera(cfg.camera)
                .with_turntable(TurntableSettings {
                    frames: cfg.eval.turntable_frames,
                    resolution: cfg.eval.resolution,
                });
            if let Some(toy) = codec.toy() {
                service = service.with_sampler(Arc::new(ToyTextSampler::new(toy.clone())));
            }
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(latedit_service::serve(Arc::new(service), (host, port).into()))?;
            Ok(())
        }
    }
}

fn read_prior_spec(path: &Path) -> Result<PriorSpec> {
    if path.is_dir() {
        return Ok(DatasetManifest::load(path)?.priors);
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing prior spec {}", path.display()))
}

fn train_cmd(
    model: &ModelArgs,
    data_dir: &Path,
    out: &Path,
    mut prompts: Vec<String>,
    prompt_file: Option<&Path>,
    resume: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(model)?;
    let codec = CodecChoice::load(&model.codec)?;
    let manifest = DatasetManifest::load(data_dir)?;
    let mut data = manifest.dataset(data_dir)?;
    if let Some(f) = prompt_file {
        let text = std::fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
        prompts.extend(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from));
    }
    if !prompts.is_empty() {
        data = data.restrict_instructions(&prompts)?;
    }
    let priors = manifest.priors.instantiate(&cfg, codec.toy().map(|c| c.as_ref()))?;
    let (mut editor, state) = match resume {
        Some(ckpt) => {
            let editor = load_editor(ckpt, codec.codec())?;
            if editor.instructions() != data.instructions() {
                bail!("checkpoint instructions differ from the selected training instructions");
            }
            let state = load_training_state(ckpt, &editor, &cfg)?;
            if state.is_none() {
                bail!("{} has no optimizer state to resume from", ckpt.display());
            }
            (editor, state)
        }
        None => {
            let editor = ToyEditor::init(
                cfg.editor.clone(),
                cfg.schedule.build()?,
                codec.codec().id(),
                codec.codec().latent_shape(),
                data.instructions().to_vec(),
            )?;
            (editor, None)
        }
    };
    let mut stdout = std::io::stdout();
    let summary = train(
        &cfg,
        &data,
        &mut editor,
        codec.differentiable(),
        priors.priors(),
        TrainOutputs {
            out_dir: Some(out),
            metrics: Some(&mut stdout),
        },
        state,
    )?;
    eprintln!(
        "trained {} steps ({} epochs); final checkpoint {}",
        summary.steps,
        summary.epochs,
        summary.checkpoints.last().map(|p| p.display().to_string()).unwrap_or_default()
    );
    Ok(())
}

fn latent_op(op: LatentOp) -> Result<()> {
    match op {
        LatentOp::Scale { src, edit, eta, out } => {
            let r = scale_edit(&load_latent(&src)?, &load_latent(&edit)?, eta)?;
            save_latent(&out, &r)?;
        }
        LatentOp::Chain {
            model,
            ckpt,
            latent,
            prompt,
            out_dir,
        } => {
            let codec = CodecChoice::load(&model.codec)?;
            let editor = load_editor(&ckpt, codec.codec())?;
            let texts: Vec<&str> = prompt.iter().map(String::as_str).collect();
            let (_, chain) = sequential_edit(&editor, &load_latent(&latent)?, &texts)?;
            std::fs::create_dir_all(&out_dir)?;
            for (i, l) in chain.iter().enumerate() {
                save_latent(&out_dir.join(format!("step-{i:02}.safetensors")), l)?;
            }
        }
        LatentOp::ExtractVector { src, edit, prompt, out } => {
            ensure!(src.len() == edit.len(), "{} sources but {} edits", src.len(), edit.len());
            let pairs = src
                .iter()
                .zip(&edit)
                .map(|(s, e)| Ok((load_latent(s)?, load_latent(e)?)))
                .collect::<Result<Vec<_>>>()?;
            extract_edit_vector(&pairs, &prompt)?.save(&out)?;
        }
        LatentOp::ApplyVector {
            latent,
            vector,
            eta,
            out,
        } => {
            let v = EditVector::load(&vector)?;
            save_latent(&out, &apply_edit_vector(&load_latent(&latent)?, &v, eta)?)?;
        }
    }
    Ok(())
}
