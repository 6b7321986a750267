//! Subcommand implementations. Each command is a pure function of
//! (config, input checkpoints, seed): all randomness flows through named
//! substreams of the master seed, so reruns are bit-identical.

use std::path::Path;

use clipmap_core::compress::{build_student, ClipMaps, MapInit};
use clipmap_core::data::{Split, SplitTable};
use clipmap_core::eval::{
    count_params, evaluate_retrieval, off_diagonal_mass, zero_shot_accuracy, RetrievalReport,
};
use clipmap_core::model::ClipModel;
use clipmap_core::train::{
    run_mapping_stage, run_pretraining, run_retraining_stage, LossLogEntry, LossWeights,
    StageConfig,
};

use crate::checkpoint::{load_maps, load_model, save_maps, save_model, write_atomic};
use crate::config::RunConfig;
use crate::report::{eval_csv, retrieval_table, write_heatmaps, write_loss_csv};
use crate::{CliError, CliResult};

fn build_table(cfg: &RunConfig) -> CliResult<SplitTable> {
    Ok(SplitTable::build(&cfg.data)?)
}

fn check_teacher_matches(cfg: &RunConfig, teacher: &ClipModel<f64>) -> CliResult<()> {
    let img = cfg.image_config()?;
    let txt = cfg.text_config()?;
    if teacher.image.config != img || teacher.text.config != txt {
        return Err(CliError::Config(format!(
            "teacher checkpoint architecture {:?}/{:?} does not match config {img:?}/{txt:?}",
            teacher.image.config, teacher.text.config
        )));
    }
    Ok(())
}

/// Train a teacher from seeded random init on the contrastive task; writes
/// `teacher.ckpt` and `pretrain_loss.csv`.
pub fn cmd_pretrain_teacher(cfg: &RunConfig, out: &Path) -> CliResult<ClipModel<f64>> {
    let model = ClipModel::init(
        cfg.image_config()?,
        cfg.text_config()?,
        cfg.model_logit_scale,
        cfg.seed,
    )?;
    let table = build_table(cfg)?;
    let (model, log) = run_pretraining(model, &cfg.data, &table, &cfg.pretrain)?;
    save_model(&out.join("teacher.ckpt"), &model)?;
    write_loss_csv(&out.join("pretrain_loss.csv"), &log)?;
    let report = evaluate_retrieval(&model, &cfg.data, &table, Split::Val, cfg.eval_pairs)?;
    println!("pretrained teacher: val TR@1 {:.2}", report.tr[0]);
    Ok(model)
}

#[derive(Debug)]
pub struct MapOutcome {
    pub maps: ClipMaps<f64>,
    pub student: ClipModel<f64>,
    pub log: Vec<LossLogEntry>,
}

/// Learn the compression maps against the frozen teacher, then materialize
/// the inherited student. Writes `maps.ckpt`, `student_init.ckpt`,
/// `map_loss.csv`, and heatmap CSVs at init, midpoint, and end.
pub fn cmd_map(cfg: &RunConfig, teacher_path: &Path, out: &Path) -> CliResult<MapOutcome> {
    let teacher = load_model(teacher_path)?;
    check_teacher_matches(cfg, &teacher)?;
    let spec = cfg.compress;
    let init = ClipMaps::init(
        &teacher.image.config,
        &teacher.text.config,
        &spec,
        MapInit::DiagInherit { off_diag_std: spec.off_diag_std },
        cfg.seed,
    )?;
    let heat_dir = out.join("heatmaps");
    write_heatmaps(&heat_dir, &init, 0)?;

    // midpoint snapshot: a half-budget run from the same init (its schedule
    // is compressed, so this approximates — not replays — the half-way state)
    if cfg.map.steps >= 2 {
        let half = StageConfig {
            steps: cfg.map.steps / 2,
            warmup: cfg.map.warmup.min(cfg.map.steps / 2 - 1),
            ..cfg.map
        };
        let (mid, _) =
            run_mapping_stage(&teacher, &spec, init.clone(), &cfg.data, &build_table(cfg)?, &half, None)?;
        write_heatmaps(&heat_dir, &mid, cfg.map.steps / 2)?;
    }

    let table = build_table(cfg)?;
    let (maps, log) = run_mapping_stage(&teacher, &spec, init, &cfg.data, &table, &cfg.map, None)?;
    write_heatmaps(&heat_dir, &maps, cfg.map.steps)?;
    let student = build_student(&teacher, &maps, &spec)?;
    save_maps(&out.join("maps.ckpt"), &maps, &teacher.image.config, &teacher.text.config, &spec)?;
    save_model(&out.join("student_init.ckpt"), &student)?;
    write_loss_csv(&out.join("map_loss.csv"), &log)?;
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        println!(
            "mapping stage: task loss {:.4} -> {:.4} over {} steps",
            first.task_loss,
            last.task_loss,
            log.len()
        );
    }
    Ok(MapOutcome { maps, student, log })
}

/// Retrain a student against the frozen teacher with λ-weighted distillation;
/// writes `student.ckpt` and `retrain_loss.csv`.
pub fn cmd_retrain(
    cfg: &RunConfig,
    teacher_path: &Path,
    student_path: &Path,
    out: &Path,
) -> CliResult<(ClipModel<f64>, Vec<LossLogEntry>)> {
    let teacher = load_model(teacher_path)?;
    check_teacher_matches(cfg, &teacher)?;
    let student = load_model(student_path)?;
    let w = LossWeights::new(cfg.lambda).map_err(|e| CliError::Config(e.to_string()))?;
    println!("retraining with lambda = {}", w.lambda);
    let table = build_table(cfg)?;
    let (student, log) = run_retraining_stage(&teacher, student, &cfg.data, &table, &cfg.retrain, w)?;
    save_model(&out.join("student.ckpt"), &student)?;
    write_loss_csv(&out.join("retrain_loss.csv"), &log)?;
    Ok((student, log))
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub report: RetrievalReport,
    pub zero_shot: Vec<f64>,
    pub params: (usize, usize, usize),
}

/// Score a checkpoint: retrieval recall, per-attribute zero-shot accuracy,
/// and parameter counts. Prints a table and writes `eval_report.csv`.
pub fn cmd_eval(cfg: &RunConfig, ckpt_path: &Path, out: &Path) -> CliResult<EvalOutcome> {
    let model = load_model(ckpt_path)?;
    let table = build_table(cfg)?;
    let report = evaluate_retrieval(&model, &cfg.data, &table, Split::Val, cfg.eval_pairs)?;
    let mut zero_shot = Vec::with_capacity(cfg.data.n_attributes);
    for k in 0..cfg.data.n_attributes {
        zero_shot.push(zero_shot_accuracy(
            &model,
            &cfg.data,
            &table,
            Split::Val,
            k,
            cfg.eval_pairs,
        )?);
    }
    let params = count_params(&model);
    print!("{}", retrieval_table(&report));
    for (k, acc) in zero_shot.iter().enumerate() {
        println!("zero-shot accuracy, attribute {k}: {acc:.2}");
    }
    println!("params: image {} + text {} = {} total", params.0, params.1, params.2);
    write_atomic(
        &out.join("eval_report.csv"),
        eval_csv(&report, &zero_shot, params).as_bytes(),
    )?;
    Ok(EvalOutcome { report, zero_shot, params })
}

/// Print mapping-matrix shapes and off-diagonal mass, and export heatmaps.
pub fn cmd_inspect_maps(maps_path: &Path, out: &Path) -> CliResult<()> {
    let loaded = load_maps(maps_path)?;
    for (name, t) in loaded.maps.named_tensors() {
        let mass = off_diagonal_mass(t)?;
        println!(
            "{name}: {}x{} off-diagonal mass {mass:.6}",
            t.shape()[0],
            t.shape()[1]
        );
    }
    write_heatmaps(&out.join("heatmaps"), &loaded.maps, 0)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct CompareRow {
    pub method: &'static str,
    pub final_task_loss: f64,
    pub val_tr1: f64,
    pub steps: usize,
    pub lr_schedule_checksum: f64,
}

/// Run the mapping stage once per initialization scheme under identical
/// budgets and report end-of-stage task loss and student val TR@1.
pub fn cmd_compare_init(
    cfg: &RunConfig,
    teacher_path: &Path,
    out: &Path,
) -> CliResult<Vec<CompareRow>> {
    let teacher = load_model(teacher_path)?;
    check_teacher_matches(cfg, &teacher)?;
    let table = build_table(cfg)?;
    let spec = cfg.compress;
    let schemes = [
        MapInit::Random,
        MapInit::FanIn,
        MapInit::FanAvg,
        MapInit::DiagInherit { off_diag_std: spec.off_diag_std },
    ];
    let mut rows = Vec::new();
    for scheme in schemes {
        let init = ClipMaps::init(&teacher.image.config, &teacher.text.config, &spec, scheme, cfg.seed)?;
        let (maps, log) =
            run_mapping_stage(&teacher, &spec, init, &cfg.data, &table, &cfg.map, None)?;
        let student = build_student(&teacher, &maps, &spec)?;
        let report = evaluate_retrieval(&student, &cfg.data, &table, Split::Val, cfg.eval_pairs)?;
        rows.push(CompareRow {
            method: scheme.label(),
            final_task_loss: log.last().map(|e| e.task_loss).unwrap_or(f64::NAN),
            val_tr1: report.tr[0],
            steps: log.len(),
            lr_schedule_checksum: log.iter().map(|e| e.lr).sum(),
        });
    }
    // controlled experiment: identical budgets and schedules across rows
    for r in &rows[1..] {
        if r.steps != rows[0].steps || r.lr_schedule_checksum != rows[0].lr_schedule_checksum {
            return Err(CliError::Config(
                "initialization comparison rows ran under different budgets".into(),
            ));
        }
    }
    let mut csv = String::from("method,final_task_loss,val_tr1,steps\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{:?},{:?},{}\n",
            r.method, r.final_task_loss, r.val_tr1, r.steps
        ));
        println!(
            "{:>8}: final task loss {:.4}, val TR@1 {:.2}",
            r.method, r.final_task_loss, r.val_tr1
        );
    }
    write_atomic(&out.join("compare_init.csv"), csv.as_bytes())?;
    Ok(rows)
}
