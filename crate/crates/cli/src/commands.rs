use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use xdistill_core::distill::{layer_log_csv, layer_report_csv, DistillConfig, DistillMode};
use xdistill_core::experiment::{
    compress_run, evaluate, mean_std, Evaluation, RunResult, TaskData,
};
use xdistill_core::network::{load_model, save_model, Network};
use xdistill_core::theory::theorem_bound;
use xdistill_core::trainer::{train_log_csv, train_teacher};

use crate::config::{ModeName, RunConfig};
use crate::error::CliError;

fn f(x: f64) -> String {
    format!("{x:.17e}")
}

fn prepare_out(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = cfg.output.dir.clone();
    fs::create_dir_all(&dir).map_err(|e| CliError::new("io", format!("{}: {e}", dir.display())))?;
    fs::write(dir.join("config.resolved.toml"), cfg.resolved())?;
    Ok(dir)
}

fn write(dir: &Path, name: &str, text: &str) -> Result<(), CliError> {
    fs::write(dir.join(name), text).map_err(|e| CliError::new("io", format!("{name}: {e}")))
}

fn load_net(path: &Path) -> Result<Network, CliError> {
    load_model(path).map_err(|e| {
        let e = CliError::from(e);
        CliError::new(e.kind, format!("{}: {}", path.display(), e.message))
    })
}

/// Task data plus the teacher, after checking they agree on shapes.
fn task_and_teacher(cfg: &RunConfig) -> Result<(TaskData, Network), CliError> {
    let task = cfg.task()?;
    let teacher = load_net(&cfg.teacher_path())?;
    if teacher.input_shape() != task.train.image_shape()
        || teacher.num_classes() != task.train.num_classes
    {
        return Err(CliError::new(
            "shape",
            format!(
                "teacher expects {:?} inputs and {} classes, data has {:?} and {}",
                teacher.input_shape(),
                teacher.num_classes(),
                task.train.image_shape(),
                task.train.num_classes
            ),
        ));
    }
    Ok((task, teacher))
}

pub fn train_teacher_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let task = cfg.task()?;
    let arch = cfg.arch_spec((task.train.image_shape(), task.train.num_classes))?;
    let dir = prepare_out(cfg)?;
    info!("training teacher on {} samples", task.train.len());
    let (teacher, log) =
        train_teacher(arch.input, arch.layers()?, &task.train, &cfg.train_config())?;
    save_model(&teacher, dir.join("teacher.xdnc"))?;
    write(&dir, "train_log.csv", &train_log_csv(&log))?;
    let eval = evaluate(&teacher, &task.heldout)?;
    let row = eval_csv("teacher.xdnc", &eval);
    write(&dir, "teacher_eval.csv", &row)?;
    print!("{row}");
    Ok(())
}

fn eval_csv(model: &str, e: &Evaluation) -> String {
    format!(
        "# xdistill evaluate v1\nmodel,top1,top5,params,flops\n{model},{},{},{},{}\n",
        f(e.top1),
        e.top5.map(f).unwrap_or_default(),
        e.params,
        e.flops
    )
}

fn runs(
    cfg: &RunConfig,
    teacher: &Network,
    task: &TaskData,
    dcfg: &DistillConfig,
) -> Result<Vec<RunResult>, CliError> {
    let scheme = cfg.prune_scheme()?;
    let finetune = cfg.finetune.enabled.then(|| cfg.finetune_config(0));
    cfg.experiment
        .seeds
        .iter()
        .map(|&seed| {
            info!("{} run, seed {seed}", dcfg.mode.name());
            Ok(compress_run(
                teacher,
                &task.train,
                &task.heldout,
                cfg.distill.k,
                seed,
                dcfg,
                &scheme,
                finetune.as_ref(),
            )?)
        })
        .collect()
}

fn overall_sparsity(r: &RunResult) -> f64 {
    let (nz, total) = r
        .report
        .layers
        .iter()
        .fold((0, 0), |(a, b), l| (a + l.nonzero, b + l.total));
    if total == 0 {
        0.0
    } else {
        1.0 - nz as f64 / total as f64
    }
}

/// Mean and std of top-1 and final-layer estimation error.
fn aggregate(results: &[RunResult]) -> Result<[(f64, f64); 2], CliError> {
    let top1: Vec<f64> = results.iter().map(|r| r.eval.top1).collect();
    let est: Vec<f64> = results.iter().map(|r| r.final_estimation).collect();
    Ok([mean_std(&top1)?, mean_std(&est)?])
}

pub fn compress_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let (task, teacher) = task_and_teacher(cfg)?;
    let dcfg = cfg.distill_config(cfg.distill_mode())?;
    let dir = prepare_out(cfg)?;
    let results = runs(cfg, &teacher, &task, &dcfg)?;
    let mode = dcfg.mode.name();
    let mut summary =
        String::from("# xdistill compress-summary v1\nmode,seed,top1,top5,params,flops,final_estimation,sparsity\n");
    for r in &results {
        let s = r.seed;
        save_model(&r.student, dir.join(format!("student_seed{s}.xdnc")))?;
        write(
            &dir,
            &format!("layer_log_seed{s}.csv"),
            &layer_log_csv(&r.report.log),
        )?;
        write(
            &dir,
            &format!("layer_report_seed{s}.csv"),
            &layer_report_csv(&r.report.layers),
        )?;
        if !r.report.finetune_log.is_empty() {
            write(
                &dir,
                &format!("finetune_log_seed{s}.csv"),
                &train_log_csv(&r.report.finetune_log),
            )?;
        }
        summary.push_str(&format!(
            "{mode},{s},{},{},{},{},{},{}\n",
            f(r.eval.top1),
            r.eval.top5.map(f).unwrap_or_default(),
            r.eval.params,
            r.eval.flops,
            f(r.final_estimation),
            f(overall_sparsity(r))
        ));
    }
    let [(acc_m, acc_s), (est_m, est_s)] = aggregate(&results)?;
    summary.push_str(&format!("{mode},mean,{},,,,{},\n", f(acc_m), f(est_m)));
    summary.push_str(&format!("{mode},std,{},,,,{},\n", f(acc_s), f(est_s)));
    write(&dir, "summary.csv", &summary)?;
    println!("{mode}: top1 {acc_m:.4} +- {acc_s:.4}, final estimation {est_m:.4} +- {est_s:.4}");
    Ok(())
}

pub fn evaluate_cmd(cfg: &RunConfig, model: &Path) -> Result<(), CliError> {
    let task = cfg.task()?;
    let net = load_net(model)?;
    let dir = prepare_out(cfg)?;
    let eval = evaluate(&net, &task.heldout)?;
    let name = model
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let row = eval_csv(&name, &eval);
    write(&dir, "evaluate.csv", &row)?;
    print!("{row}");
    Ok(())
}

pub fn verify_bounds_cmd(cfg: &RunConfig, model: &Path) -> Result<(), CliError> {
    let (task, teacher) = task_and_teacher(cfg)?;
    let student = load_net(model)?;
    let dir = prepare_out(cfg)?;
    let report = theorem_bound(
        &teacher,
        &student,
        cfg.distill.mu,
        &task.heldout.images,
        &task.heldout.labels,
    )?;
    write(&dir, "bound_report.csv", &report.to_csv())?;
    println!(
        "bound_satisfied={} violations={} lhs_mean={:.6e} rhs_mean={:.6e} min_slack={:.6e}",
        report.bound_satisfied,
        report.violations(),
        report.lhs_mean,
        report.rhs_mean,
        report.min_slack
    );
    Ok(())
}

/// All subsets of `items` with 1..=max_size elements, by size then lexicographically.
pub fn subsets(items: &[usize], max_size: usize) -> Vec<Vec<usize>> {
    fn rec(
        items: &[usize],
        size: usize,
        start: usize,
        cur: &mut Vec<usize>,
        out: &mut Vec<Vec<usize>>,
    ) {
        if cur.len() == size {
            out.push(cur.clone());
            return;
        }
        for i in start..items.len() {
            cur.push(items[i]);
            rec(items, size, i + 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    for size in 1..=max_size.min(items.len()) {
        rec(items, size, 0, &mut Vec::new(), &mut out);
    }
    out
}

fn stats_row(label: &str, results: &[RunResult]) -> Result<String, CliError> {
    let [(am, asd), (em, esd)] = aggregate(results)?;
    Ok(format!(
        "{label},{},{},{},{}\n",
        f(am),
        f(asd),
        f(em),
        f(esd)
    ))
}

pub fn ablate_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let (task, teacher) = task_and_teacher(cfg)?;
    let mode = match cfg.distill.mode {
        ModeName::Nc => DistillMode::Cross { mu: cfg.distill.mu },
        _ => cfg.distill_mode(),
    };
    let base = cfg.distill_config(mode)?;
    let positions: Vec<usize> = if cfg.ablation.positions.is_empty() {
        (0..cfg.arch.channels.len()).collect()
    } else {
        cfg.ablation
            .positions
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    };
    let dir = prepare_out(cfg)?;
    let mut csv = String::from(
        "# xdistill ablation v1\ncross_layers,top1_mean,top1_std,estimation_mean,estimation_std\n",
    );
    let mut combos = vec![Vec::new()];
    combos.extend(subsets(&positions, cfg.ablation.max_size));
    for combo in combos {
        let label = if combo.is_empty() {
            "none".to_string()
        } else {
            combo
                .iter()
                .map(|l| l.to_string())
                .collect::<Vec<_>>()
                .join("+")
        };
        let dcfg = DistillConfig {
            cross_layers: Some(combo.into_iter().collect()),
            ..base.clone()
        };
        let results = runs(cfg, &teacher, &task, &dcfg)?;
        csv.push_str(&stats_row(&label, &results)?);
    }
    write(&dir, "ablation.csv", &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn sweep_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let (task, teacher) = task_and_teacher(cfg)?;
    let grid = cfg.sweep_grid();
    let modes: Vec<(String, DistillMode)> = match cfg.distill.mode {
        ModeName::Soft => grid
            .iter()
            .flat_map(|&alpha| grid.iter().map(move |&beta| (alpha, beta)))
            .map(|(alpha, beta)| {
                (
                    format!("soft,,{},{}", f(alpha), f(beta)),
                    DistillMode::Soft { alpha, beta },
                )
            })
            .collect(),
        _ => grid
            .iter()
            .map(|&mu| (format!("cross,{},,", f(mu)), DistillMode::Cross { mu }))
            .collect(),
    };
    let dir = prepare_out(cfg)?;
    let mut csv =
        String::from("# xdistill sweep v1\nmode,mu,alpha,beta,top1_mean,top1_std,estimation_mean,estimation_std\n");
    for (label, mode) in modes {
        let dcfg = cfg.distill_config(mode)?;
        let results = runs(cfg, &teacher, &task, &dcfg)?;
        csv.push_str(&stats_row(&label, &results)?);
    }
    write(&dir, "sweep.csv", &csv)?;
    print!("{csv}");
    Ok(())
}
