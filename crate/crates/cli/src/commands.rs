use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use multiclip::checkpoint::{fingerprint, Checkpoint};
use multiclip::dual_encoder::EmbeddingAdapter;
use multiclip::finetune::metadata_field;
use multiclip::metrics::EvalReport;
use multiclip::pretrain::{
    embedding_table_from_tsv, embedding_table_to_tsv, export_embeddings, intra_inter_cosine, log_to_csv,
    project_2d, render_scene, run_pretraining, ModelConfig, PretrainConfig, PRETRAIN_KIND,
};
use multiclip::scene_data::{load_dataset, write_dataset, Dataset, Split};
use multiclip::sqa_model::{evaluate_sqa, finetune_sqa, load_sqa, predict_sqa, SqaPredictionRecord};
use multiclip::vqa_model::{evaluate_vqa, finetune_vqa, load_vqa, predict_vqa, VqaPredictionRecord};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::manifest::OutputDir;
use crate::{
    AblationArgs, CliError, Command, EmbedArgs, EvalArgs, FinetuneArgs, GenDataArgs, PretrainArgs, ProjectArgs,
};

pub fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain(a),
        Command::FinetuneVqa(a) => finetune(a, Task::Vqa),
        Command::FinetuneSqa(a) => finetune(a, Task::Sqa),
        Command::EvalVqa(a) => eval(a, Task::Vqa),
        Command::EvalSqa(a) => eval(a, Task::Sqa),
        Command::Embed(a) => embed(a),
        Command::Project(a) => project(a),
        Command::Ablation(a) => ablation(a),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Task {
    Vqa,
    Sqa,
}

impl Task {
    fn name(self) -> &'static str {
        match self {
            Task::Vqa => "vqa",
            Task::Sqa => "sqa",
        }
    }
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Ok(Checkpoint::load(path)?)
}

/// Loads `split` from `data`, or synthesizes it from the configuration.
fn dataset(cfg: &ExperimentConfig, data: Option<&Path>, split: Split) -> Result<Dataset, CliError> {
    let ds = match data {
        Some(root) => load_dataset(root, split)?,
        None => cfg.data.synthesize(split)?,
    };
    check_classes(&ds, &cfg.model)?;
    Ok(ds)
}

fn check_classes(ds: &Dataset, model: &ModelConfig) -> Result<(), CliError> {
    let n = ds.labels.num_classes();
    if n != model.scene.num_classes {
        return Err(CliError::Config(format!(
            "dataset has {n} classes but model.scene.num_classes is {}",
            model.scene.num_classes
        )));
    }
    Ok(())
}

fn gen_data(args: GenDataArgs) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(args.common.config.as_deref())?;
    if let Some(s) = args.common.seed {
        cfg.data.seed = s;
    }
    if let Some(n) = args.scenes {
        cfg.data.train_scenes = n;
    }
    if let Some(n) = args.test_scenes {
        cfg.data.test_scenes = n;
    }
    if cfg.data.train_scenes == 0 {
        return Err(CliError::Config("at least one training scene is required".into()));
    }
    let splits: Vec<(Split, Dataset)> = Split::ALL
        .into_iter()
        .filter(|s| cfg.data.scenes(*s) > 0)
        .map(|s| cfg.data.synthesize(s).map(|d| (s, d)))
        .collect::<multiclip::Result<_>>()?;
    let mut out = OutputDir::create(&args.common.out)?;
    for (split, ds) in &splits {
        write_dataset(out.root(), *split, ds)?;
        out.record_tree(split.as_str())?;
        println!("{split}: {} scenes, {} questions, {} situated questions", ds.scenes.len(), ds.qa.len(), ds.sqa.len());
    }
    out.record("labels.json");
    out.finish("gen-data", Some(cfg.data.seed), fingerprint(&cfg.data))?;
    Ok(())
}

fn pretrain(args: PretrainArgs) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(args.common.config.as_deref())?.with_seed(args.common.seed);
    let adapter = match &args.adapter {
        Some(p) => Some(EmbeddingAdapter::from_json(&fs::read_to_string(p)?)?),
        None => None,
    };
    let train = dataset(&cfg, args.data.as_deref(), Split::Train)?;
    let output = run_pretraining(&train, &cfg.model, &cfg.pretrain, cfg.seed, adapter.as_ref())?;

    let mut out = OutputDir::create(&args.common.out)?;
    out.write("pretrain.ckpt", output.checkpoint.to_bytes())?;
    out.write("pretrain_log.csv", log_to_csv(&output.log))?;
    for (iteration, ck) in &output.intermediate {
        out.write(&format!("pretrain_iter{iteration:06}.ckpt"), ck.to_bytes())?;
    }
    if !output.view_poses.is_empty() {
        out.write_json("view_poses.json", &output.view_poses)?;
    }
    if let Some(dir) = &args.dump_views {
        dump_views(&train, &cfg, dir)?;
    }
    if let Some(last) = output.log.last() {
        println!(
            "iteration {}: L_pre {:.4} (L_det {:.4}, L_text {:.4}, L_image {:.4})",
            last.iteration, last.l_pre, last.l_det, last.l_text, last.l_image
        );
    }
    out.finish("pretrain", Some(cfg.seed), fingerprint(&cfg))?;
    Ok(())
}

fn dump_views(train: &Dataset, cfg: &ExperimentConfig, dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    for scene in &train.scenes {
        for (k, view) in render_scene(scene, cfg.pretrain.num_views, &cfg.model.render)?.iter().enumerate() {
            view.write_png(&dir.join(format!("{}_view{k}.png", scene.scene_id)))?;
        }
    }
    Ok(())
}

fn finetune(args: FinetuneArgs, task: Task) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(args.common.config.as_deref())?.with_seed(args.common.seed);
    let pretrained = args.pretrained.as_deref().map(read_checkpoint).transpose()?;
    let train = dataset(&cfg, args.data.as_deref(), Split::Train)?;
    let (checkpoint, log, answers, init) = match task {
        Task::Vqa => {
            let r = finetune_vqa(&train, pretrained.as_ref(), &cfg.model, &cfg.vqa, &cfg.finetune_vqa, cfg.seed)?;
            (r.checkpoint, r.log, r.answers, r.init)
        }
        Task::Sqa => {
            let r = finetune_sqa(&train, pretrained.as_ref(), &cfg.model, &cfg.sqa, &cfg.finetune_sqa, cfg.seed)?;
            (r.checkpoint, r.log, r.answers, r.init)
        }
    };
    let name = task.name();
    let mut out = OutputDir::create(&args.common.out)?;
    out.write(&format!("{name}.ckpt"), checkpoint.to_bytes())?;
    out.write(&format!("{name}_log.csv"), log.to_csv())?;
    out.write_json("answers.json", &answers.answers())?;
    if let Some(last) = log.records.last() {
        println!("{name} ({init:?} init) step {}: loss {:.4}", last.step, last.total);
    }
    let fp = fingerprint(&(&cfg, pretrained.as_ref().map(|c| c.fingerprint.as_str())));
    out.finish(&format!("finetune-{name}"), Some(cfg.seed), fp)?;
    Ok(())
}

/// Percentages with two decimals, in the column order of the usual result tables.
pub fn report_table(task: &str, split: Split, r: &EvalReport) -> String {
    let pct = |v: f64| format!("{:.2}", 100.0 * v);
    let mut header = vec!["Task", "Split", "EM@1", "BLEU-1", "BLEU-4", "ROUGE-L", "CIDEr"];
    let mut row = vec![
        task.to_string(),
        split.to_string(),
        pct(r.em_at_1),
        pct(r.bleu_1),
        pct(r.bleu_4),
        pct(r.rouge_l),
        pct(r.cider),
    ];
    if let (Some(a25), Some(a5)) = (r.acc_at_025, r.acc_at_05) {
        header.extend(["Acc@0.25", "Acc@0.5"]);
        row.extend([pct(a25), pct(a5)]);
    }
    table(&header, &[row])
}

fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..header.len())
        .map(|i| rows.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        format!("| {} |\n", padded.join(" | "))
    };
    let mut s = line(header.to_vec());
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    let _ = writeln!(s, "|-{}-|", rule.join("-|-"));
    for r in rows {
        s.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    s
}

fn eval(args: EvalArgs, task: Task) -> Result<(), CliError> {
    let data = load_dataset(&args.data, args.split)?;
    let mut out = OutputDir::create(&args.out)?;
    let (report, source) = match (task, &args.checkpoint, &args.predictions) {
        (Task::Vqa, Some(ck), _) => {
            let ck = read_checkpoint(ck)?;
            let artifact = load_vqa(&ck, None)?;
            check_classes(&data, &artifact.model_config)?;
            let preds = predict_vqa(&artifact, &data)?;
            out.write_json("predictions.json", &preds)?;
            (evaluate_vqa(&preds, &data)?, ck.fingerprint)
        }
        (Task::Sqa, Some(ck), _) => {
            let ck = read_checkpoint(ck)?;
            let artifact = load_sqa(&ck, None)?;
            check_classes(&data, &artifact.model_config)?;
            let preds = predict_sqa(&artifact, &data)?;
            out.write_json("predictions.json", &preds)?;
            (evaluate_sqa(&preds, &data)?, ck.fingerprint)
        }
        (Task::Vqa, None, Some(p)) => {
            let text = fs::read(p)?;
            let preds: Vec<VqaPredictionRecord> = serde_json::from_slice(&text)?;
            (evaluate_vqa(&preds, &data)?, multiclip::checkpoint::sha256_hex(&text))
        }
        (Task::Sqa, None, Some(p)) => {
            let text = fs::read(p)?;
            let preds: Vec<SqaPredictionRecord> = serde_json::from_slice(&text)?;
            (evaluate_sqa(&preds, &data)?, multiclip::checkpoint::sha256_hex(&text))
        }
        (_, None, None) => return Err(CliError::Usage("either --checkpoint or --predictions is required".into())),
    };
    let name = task.name().to_uppercase();
    let text = report_table(&name, args.split, &report);
    print!("{text}");
    out.write_json("report.json", &report)?;
    out.write("report.txt", text)?;
    out.finish(&format!("eval-{}", task.name()), None, fingerprint(&(source, args.split)))?;
    Ok(())
}

fn embed(args: EmbedArgs) -> Result<(), CliError> {
    let ck = read_checkpoint(&args.checkpoint)?;
    if ck.kind != PRETRAIN_KIND {
        return Err(CliError::Usage(format!("expected a pre-training checkpoint, got kind `{}`", ck.kind)));
    }
    let model: ModelConfig = metadata_field(&ck, "model")?;
    let data = load_dataset(&args.data, args.split)?;
    check_classes(&data, &model)?;
    let rows = export_embeddings(&data, &ck, &model.scene)?;
    let (intra, inter) = intra_inter_cosine(&rows);
    let mut out = OutputDir::create(&args.out)?;
    out.write("embeddings.tsv", embedding_table_to_tsv(&rows))?;
    out.write_json("cosine_summary.json", &CosineSummary { intra_type: intra, inter_type: inter })?;
    println!("{} scenes; mean intra-type cosine {intra:?}, inter-type {inter:?}", rows.len());
    out.finish("embed", None, fingerprint(&(ck.fingerprint, args.split)))?;
    Ok(())
}

#[derive(Serialize)]
struct CosineSummary {
    intra_type: Option<f64>,
    inter_type: Option<f64>,
}

fn project(args: ProjectArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&args.embeddings)?;
    let rows = embedding_table_from_tsv(&text)?;
    let vectors: Vec<Vec<f64>> = rows.iter().map(|r| r.vector.clone()).collect();
    let coords = project_2d(&vectors)?;
    let mut tsv = String::from("scene_id\tscene_type\tx\ty\n");
    for (r, c) in rows.iter().zip(&coords) {
        let _ = writeln!(tsv, "{}\t{}\t{}\t{}", r.scene_id, r.scene_type, c[0], c[1]);
    }
    let mut out = OutputDir::create(&args.out)?;
    out.write("projection.tsv", tsv)?;
    out.finish("project", None, multiclip::checkpoint::sha256_hex(text.as_bytes()))?;
    Ok(())
}

/// Name and pre-training configuration of each ablation row.
pub fn ablation_variants(base: &PretrainConfig) -> Vec<(&'static str, PretrainConfig)> {
    let with = |f: &dyn Fn(&mut PretrainConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    vec![
        ("full", base.clone()),
        ("single-view", with(&|c| c.num_views = 1)),
        ("cosine", with(&|c| c.loss.use_cosine_variant = true)),
        ("w/o L_text", with(&|c| c.loss.use_text_loss = false)),
        ("w/o L_image", with(&|c| c.loss.use_image_loss = false)),
    ]
}

#[derive(Serialize)]
struct AblationRow {
    variant: String,
    em_at_1: f64,
    final_l_pre: Option<f64>,
}

fn ablation(args: AblationArgs) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(args.common.config.as_deref())?.with_seed(args.common.seed);
    let train = dataset(&cfg, args.data.as_deref(), Split::Train)?;
    let eval_set = dataset(&cfg, args.data.as_deref(), cfg.eval.split)?;
    let mut rows = Vec::new();
    for (variant, pre_cfg) in ablation_variants(&cfg.pretrain) {
        let pre = run_pretraining(&train, &cfg.model, &pre_cfg, cfg.seed, None)?;
        let tuned = finetune_sqa(&train, Some(&pre.checkpoint), &cfg.model, &cfg.sqa, &cfg.finetune_sqa, cfg.seed)?;
        let artifact = load_sqa(&tuned.checkpoint, Some(&cfg.model))?;
        let report = evaluate_sqa(&predict_sqa(&artifact, &eval_set)?, &eval_set)?;
        println!("{variant}: EM@1 {:.2}", 100.0 * report.em_at_1);
        rows.push(AblationRow {
            variant: variant.to_string(),
            em_at_1: report.em_at_1,
            final_l_pre: pre.log.last().map(|r| r.l_pre),
        });
    }
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.variant.clone(), format!("{:.2}", 100.0 * r.em_at_1)])
        .collect();
    let text = table(&["Variant", "EM@1"], &cells);
    print!("{text}");
    let mut out = OutputDir::create(&args.common.out)?;
    out.write_json("ablation.json", &rows)?;
    out.write("ablation.txt", text)?;
    out.finish("ablation", Some(cfg.seed), fingerprint(&cfg))?;
    Ok(())
}
