//! Subcommand implementations. Every command is deterministic given the
//! resolved config and seeds, and logs that config plus its hash next to its
//! outputs.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use crprune_core::amplify::{amplified_sample, AmplifyConfig, StepDivergence};
use crprune_core::anneal::{run as sa_run, SaParams};
use crprune_core::datagen::{make_dataset, PatternClass};
use crprune_core::diffusion::{
    make_schedule, sample, train, ModelPredictor, NoiseSchedule, TrainConfig,
};
use crprune_core::error::{Error, Result};
use crprune_core::eval::{evaluate, sweep, EvalConfig, MetricsReport, ModelEnergy};
use crprune_core::pgm::{read_pgm, write_pgm};
use crprune_core::prune::{
    build_mask_scoped, load_mask, save_mask, PruneMask, RatioConfig,
};
use crprune_core::tensor::Tensor;
use crprune_core::unet::{build, load_checkpoint, save_checkpoint, ParameterStore};

use crate::config::{parse_size, RunConfig};

fn reports_dir(cfg: &RunConfig) -> PathBuf {
    PathBuf::from(&cfg.paths.reports)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

/// Writes the resolved config + hash into the output directory and returns
/// the hash.
fn log_resolved_config(cfg: &RunConfig, dir: &Path, command: &str) -> Result<String> {
    let (json_text, hash) = cfg.resolved_json()?;
    write_text(&dir.join(format!("{command}_config.json")), &json_text)?;
    Ok(hash)
}

fn schedule_of(cfg: &RunConfig) -> Result<NoiseSchedule> {
    make_schedule(cfg.schedule.t, cfg.schedule.beta_start, cfg.schedule.beta_end)
}

fn load_store(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<ParameterStore> {
    let path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(&cfg.paths.checkpoint));
    load_checkpoint(&path)
}

pub fn cmd_train(
    cfg: &RunConfig,
    epochs_override: Option<usize>,
    resume: bool,
    out: Option<&Path>,
) -> Result<Value> {
    let dir = reports_dir(cfg);
    std::fs::create_dir_all(&dir)?;
    let mut cfg = cfg.clone();
    if let Some(e) = epochs_override {
        cfg.train.epochs = e;
    }
    let hash = log_resolved_config(&cfg, &dir, "train")?;

    let ckpt_path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(&cfg.paths.checkpoint));
    let mut store = if resume {
        load_checkpoint(&ckpt_path)?
    } else {
        build(cfg.model.width, cfg.model.seed, cfg.model.train_h, cfg.model.train_w)?
    };

    let sched = schedule_of(&cfg)?;
    let classes = cfg.classes(&cfg.data.classes)?;
    let dataset = make_dataset(
        &classes,
        cfg.data.n_per_class,
        cfg.model.train_h,
        cfg.model.train_w,
        cfg.data.seed,
        cfg.data.jitter,
    )?;
    let train_cfg = TrainConfig {
        epochs: cfg.train.epochs,
        batch: cfg.train.batch,
        lr: cfg.train.lr,
        seed: cfg.train.seed,
    };
    let report = train(&mut store, &dataset, &sched, &train_cfg)?;
    save_checkpoint(&store, &ckpt_path)?;

    let mut csv = String::from("epoch,step,loss\n");
    for p in &report.curve {
        csv.push_str(&format!("{},{},{}\n", p.epoch, p.step, p.loss));
    }
    write_text(&dir.join("train_loss.csv"), &csv)?;

    let final_epoch_loss = report
        .curve
        .iter()
        .rev()
        .take_while(|p| p.epoch == store.epochs_done.saturating_sub(1))
        .map(|p| p.loss)
        .collect::<Vec<_>>();
    let final_loss = if final_epoch_loss.is_empty() {
        f64::NAN
    } else {
        final_epoch_loss.iter().sum::<f64>() / final_epoch_loss.len() as f64
    };

    let summary = json!({
        "checkpoint": ckpt_path.to_string_lossy(),
        "epochs_done": store.epochs_done,
        "final_epoch_loss": final_loss,
        "config_hash": hash,
    });
    write_text(
        &dir.join("train_manifest.json"),
        &serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}

pub struct PruneArgs {
    pub checkpoint: Option<PathBuf>,
    pub uniform: Option<f64>,
    pub ratios: Option<(f64, f64, f64)>,
    pub out: Option<PathBuf>,
}

pub fn cmd_prune(cfg: &RunConfig, args: &PruneArgs) -> Result<Value> {
    let dir = reports_dir(cfg);
    std::fs::create_dir_all(&dir)?;
    let mut cfg = cfg.clone();
    if let Some(u) = args.uniform {
        cfg.prune.uniform = Some(u);
    }
    if let Some((d, m, u)) = args.ratios {
        cfg.prune.uniform = None;
        cfg.prune.r_down = d;
        cfg.prune.r_mid = m;
        cfg.prune.r_up = u;
    }
    let hash = log_resolved_config(&cfg, &dir, "prune")?;

    let store = load_store(&cfg, args.checkpoint.as_deref())?;
    let ratio = cfg.prune.ratio_config()?;
    let mask = build_mask_scoped(&store, &ratio, cfg.prune.scope)?;
    let mask_path = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.paths.mask));
    save_mask(&mask, &mask_path)?;

    let sparsity = mask.achieved_sparsity();
    let summary = json!({
        "mask": mask_path.to_string_lossy(),
        "config": ratio,
        "scope": cfg.prune.scope,
        "achieved_sparsity": {"down": sparsity[0], "mid": sparsity[1], "up": sparsity[2]},
        "config_hash": hash,
    });
    write_text(
        &dir.join("prune_manifest.json"),
        &serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}

pub struct SearchArgs {
    pub checkpoint: Option<PathBuf>,
    pub objective: String,
    pub n_iter: Option<usize>,
    pub class_filter: Option<String>,
    pub size: Option<String>,
}

/// Synthetic convex benchmark energy: squared distance to (0.4, 0.3, 0.2).
pub fn synthetic_energy(r: &RatioConfig) -> Result<f64> {
    let target = [0.4, 0.3, 0.2];
    Ok(r.as_array()
        .iter()
        .zip(target)
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

pub fn cmd_search(cfg: &RunConfig, args: &SearchArgs) -> Result<Value> {
    let dir = reports_dir(cfg);
    std::fs::create_dir_all(&dir)?;
    let mut cfg = cfg.clone();
    if let Some(n) = args.n_iter {
        cfg.sa.n_iter = n;
    }
    if let Some(c) = &args.class_filter {
        cfg.sa.class_filter = Some(c.clone());
    }
    if let Some(s) = &args.size {
        cfg.sa.size = s.clone();
    }
    let hash = log_resolved_config(&cfg, &dir, "search")?;

    let params = SaParams {
        t_init: cfg.sa.t_init,
        alpha: cfg.sa.alpha,
        n_iter: cfg.sa.n_iter,
        seeds: cfg.sa.seeds.clone(),
        restart_max: cfg.sa.r_max,
        t_min: cfg.sa.t_min,
        rng_seed: cfg.sa.rng_seed,
        normalize_energy: true,
    };

    let trace_path = dir.join("search_trace.csv");
    let mut trace_file = std::fs::File::create(&trace_path)?;
    writeln!(trace_file, "iter,T,r_down,r_mid,r_up,E,accepted,E_best")?;
    let observer = |row: &crprune_core::anneal::TraceRow| {
        let line = format!(
            "{},{},{},{},{},{},{},{}\n",
            row.iter,
            row.temperature,
            row.config.r_down,
            row.config.r_mid,
            row.config.r_up,
            row.energy,
            row.accepted,
            row.energy_best
        );
        let _ = trace_file.write_all(line.as_bytes());
        let _ = trace_file.flush();
    };

    let state = match args.objective.as_str() {
        "synthetic" => sa_run(&params, &synthetic_energy, observer)?,
        "model" => {
            let store = load_store(&cfg, args.checkpoint.as_deref())?;
            let sched = schedule_of(&cfg)?;
            let classes = match &cfg.sa.class_filter {
                Some(id) => vec![PatternClass::from_id(id)?],
                None => cfg.classes(&cfg.data.classes)?,
            };
            let (h, w) = parse_size(&cfg.sa.size)?;
            let energy = ModelEnergy {
                store: &store,
                sched: &sched,
                classes,
                n: cfg.sa.n_eval,
                h,
                w,
                seed: cfg.sa.eval_seed,
                scope: cfg.prune.scope,
            };
            sa_run(&params, &energy, observer)?
        }
        other => {
            return Err(Error::invalid(format!(
                "unknown objective '{other}' (expected model or synthetic)"
            )));
        }
    };

    write_text(
        &dir.join("best_config.json"),
        &serde_json::to_string(&state.s_best)?,
    )?;
    let summary = json!({
        "best": state.s_best,
        "energy_best": state.e_best,
        "evaluations": state.evaluations,
        "restarts": state.restarts,
        "seed_energies": state.seed_energies,
        "trace": trace_path.to_string_lossy(),
        "config_hash": hash,
    });
    write_text(
        &dir.join("search_manifest.json"),
        &serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}

pub struct SampleArgs {
    pub checkpoint: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub k: Option<f64>,
    pub size: Option<String>,
    pub n: usize,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
}

fn divergence_csv(stats: &[StepDivergence], chains: usize) -> String {
    // Aggregate per timestep over chains: mean of per-chain means, max of maxes.
    let mut csv = String::from("t,mean_abs,max_abs\n");
    let mut i = 0usize;
    while i < stats.len() {
        let t = stats[i].t;
        let mut sum = 0.0f64;
        let mut max = 0.0f64;
        let mut count = 0usize;
        while i < stats.len() && stats[i].t == t {
            sum += stats[i].mean_abs;
            max = max.max(stats[i].max_abs);
            count += 1;
            i += 1;
        }
        debug_assert_eq!(count, chains);
        csv.push_str(&format!("{},{},{}\n", t, sum / count as f64, max));
    }
    csv
}

pub fn cmd_sample(cfg: &RunConfig, args: &SampleArgs) -> Result<Value> {
    let out_dir = args
        .out_dir
        .clone()
        .unwrap_or_else(|| reports_dir(cfg).join("samples"));
    std::fs::create_dir_all(&out_dir)?;
    let mut cfg = cfg.clone();
    if let Some(k) = args.k {
        cfg.poa.k = k;
    }
    let hash = log_resolved_config(&cfg, &out_dir, "sample")?;

    let store = load_store(&cfg, args.checkpoint.as_deref())?;
    let sched = schedule_of(&cfg)?;
    let (h, w) = parse_size(args.size.as_deref().unwrap_or("16x16"))?;
    let classes = cfg.classes(&cfg.data.classes)?;
    let class_cycle: Vec<PatternClass> =
        (0..args.n).map(|i| classes[i % classes.len()]).collect();
    let class_ids: Vec<usize> = class_cycle.iter().map(|c| c.index()).collect();

    let mask = args.mask.as_deref().map(load_mask).transpose()?;
    let (images, divergence) = match (&mask, args.k) {
        (Some(mask), Some(_)) => {
            let amp = AmplifyConfig {
                k: cfg.poa.k,
                target: cfg.poa.target,
            };
            let (imgs, stats) =
                amplified_sample(&store, &sched, mask, &amp, &class_ids, h, w, args.seed)?;
            (imgs, Some(stats))
        }
        (Some(mask), None) => {
            let model = store.resolve::<f32>(Some(mask))?;
            let imgs = sample(&ModelPredictor { model: &model }, &sched, &class_ids, h, w, args.seed)?;
            (imgs, None)
        }
        (None, _) => {
            let model = store.resolve::<f32>(None)?;
            let imgs = sample(&ModelPredictor { model: &model }, &sched, &class_ids, h, w, args.seed)?;
            (imgs, None)
        }
    };

    let mut files = Vec::new();
    for (i, (img, class)) in images.iter().zip(&class_cycle).enumerate() {
        let name = format!("img_{i:04}_{}.pgm", class.id());
        let flat = img.reshaped(&[1, h, w])?;
        write_pgm(&flat, &out_dir.join(&name))?;
        files.push(json!({"file": name, "class": class.id(), "chain": i}));
    }
    if let Some(stats) = &divergence {
        write_text(&out_dir.join("divergence.csv"), &divergence_csv(stats, args.n))?;
    }

    let summary = json!({
        "out_dir": out_dir.to_string_lossy(),
        "n": args.n,
        "size": format!("{h}x{w}"),
        "seed": args.seed,
        "mask": args.mask.as_ref().map(|p| p.to_string_lossy().to_string()),
        "k": args.k.map(|_| cfg.poa.k),
        "images": files,
        "config_hash": hash,
    });
    write_text(
        &out_dir.join("manifest.json"),
        &serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}

pub struct SweepArgs {
    pub checkpoint: Option<PathBuf>,
    pub grid: Option<Vec<f64>>,
    pub size: Option<String>,
}

pub fn default_sweep_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 * 0.05).collect()
}

pub fn cmd_sweep(cfg: &RunConfig, args: &SweepArgs) -> Result<Value> {
    let dir = reports_dir(cfg);
    std::fs::create_dir_all(&dir)?;
    let hash = log_resolved_config(cfg, &dir, "sweep")?;

    let store = load_store(cfg, args.checkpoint.as_deref())?;
    let sched = schedule_of(cfg)?;
    let classes = cfg.classes(&cfg.eval.classes)?;
    let (h, w) = parse_size(args.size.as_deref().unwrap_or("24x24"))?;
    let grid = args.grid.clone().unwrap_or_else(default_sweep_grid);

    let (report, curve) = sweep(&store, &sched, &grid, h, w, &classes, cfg.eval.n, cfg.eval.seed)?;
    write_text(&dir.join("sweep_report.csv"), &report.to_csv())?;
    let mut curve_csv = String::from("sparsity,ffd,score\n");
    for p in &curve {
        curve_csv.push_str(&format!("{},{},{}\n", p.sparsity, p.ffd, p.score));
    }
    write_text(&dir.join("sweep_curve.csv"), &curve_csv)?;

    let summary = json!({
        "grid": grid,
        "size": format!("{h}x{w}"),
        "rows": report.rows.len(),
        "report": dir.join("sweep_report.csv").to_string_lossy(),
        "curve": dir.join("sweep_curve.csv").to_string_lossy(),
        "config_hash": hash,
    });
    Ok(summary)
}

pub struct EvalArgs {
    pub checkpoint: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub k: Option<f64>,
    pub config_id: Option<String>,
}

pub fn cmd_eval(cfg: &RunConfig, args: &EvalArgs) -> Result<Value> {
    let dir = reports_dir(cfg);
    std::fs::create_dir_all(&dir)?;
    let hash = log_resolved_config(cfg, &dir, "eval")?;

    let store = load_store(cfg, args.checkpoint.as_deref())?;
    let sched = schedule_of(cfg)?;
    let classes = cfg.classes(&cfg.eval.classes)?;
    let sizes = cfg.eval_sizes()?;

    let mask = args.mask.as_deref().map(load_mask).transpose()?;
    let (config, id) = eval_config_for(&mask, args.k, cfg, args.config_id.clone());

    let report = evaluate(&store, &sched, &config, &sizes, &classes, cfg.eval.n, cfg.eval.seed)?;
    let csv_path = dir.join(format!("eval_{id}.csv"));
    write_text(&csv_path, &report.to_csv())?;

    // One sample image per size for the side-by-side panel.
    for &(h, w) in &sizes {
        let gen_seed = crprune_core::rng::derive_seed(
            cfg.eval.seed,
            "gen",
            (h * 100_000 + w) as u64,
        );
        let lead_class = crprune_core::eval::cycled_classes(&classes, 1);
        let imgs = crprune_core::eval::generate_images(
            &store, &sched, &config, &lead_class, h, w, gen_seed,
        )?;
        write_pgm(
            &imgs[0].0,
            &dir.join("samples").join(format!("{id}_{h}x{w}.pgm")),
        )?;
    }

    let summary = json!({
        "config_id": id,
        "csv": csv_path.to_string_lossy(),
        "rows": report.rows.len(),
        "config_hash": hash,
    });
    Ok(summary)
}

fn eval_config_for<'a>(
    mask: &'a Option<PruneMask>,
    k: Option<f64>,
    cfg: &RunConfig,
    id_override: Option<String>,
) -> (EvalConfig<'a>, String) {
    match (mask, k) {
        (Some(m), Some(kv)) => {
            let id = id_override.unwrap_or_else(|| "amplified".to_string());
            let mut c = EvalConfig::amplified(id.clone(), m, kv);
            c.target = cfg.poa.target;
            (c, id)
        }
        (Some(m), None) => {
            let id = id_override.unwrap_or_else(|| "pruned".to_string());
            (EvalConfig::pruned(id.clone(), m), id)
        }
        (None, _) => {
            let id = id_override.unwrap_or_else(|| "dense".to_string());
            let mut c = EvalConfig::dense();
            c.id = id.clone();
            (c, id)
        }
    }
}

pub struct ReportArgs {
    pub dense_csv: Option<PathBuf>,
    pub method_csv: Option<PathBuf>,
}

/// Minimal CSV line parser handling quoted fields.
fn parse_csv_line(line: &str) -> Vec<String> {
    let mut fields = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '"' if quoted && chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            '"' => quoted = !quoted,
            ',' if !quoted => {
                fields.push(std::mem::take(&mut cur));
            }
            _ => cur.push(c),
        }
    }
    fields.push(cur);
    fields
}

struct EvalRow {
    config_id: String,
    resolution: String,
    ffd: f64,
    mean_score: f64,
}

fn read_eval_csv(path: &Path) -> Result<Vec<EvalRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::CorruptArtifact(format!("{} is empty", path.display())))?;
    if header != MetricsReport::CSV_HEADER {
        return Err(Error::CorruptArtifact(format!(
            "{} has unexpected header",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let f = parse_csv_line(line);
        if f.len() != 7 {
            return Err(Error::CorruptArtifact(format!(
                "{}: bad row '{line}'",
                path.display()
            )));
        }
        rows.push(EvalRow {
            config_id: f[0].clone(),
            resolution: f[1].clone(),
            ffd: f[2]
                .parse()
                .map_err(|_| Error::CorruptArtifact(format!("bad ffd in '{line}'")))?,
            mean_score: f[3]
                .parse()
                .map_err(|_| Error::CorruptArtifact(format!("bad score in '{line}'")))?,
        });
    }
    Ok(rows)
}

/// Places `tile` into `canvas` at (row0, col0); both are [1,H,W].
fn blit(canvas: &mut Tensor, tile: &Tensor, row0: usize, col0: usize) {
    let cw = canvas.extent(2);
    let (th, tw) = (tile.extent(1), tile.extent(2));
    for i in 0..th {
        for j in 0..tw {
            canvas.data_mut()[(row0 + i) * cw + col0 + j] = tile.data()[i * tw + j];
        }
    }
}

pub fn cmd_report(cfg: &RunConfig, args: &ReportArgs) -> Result<Value> {
    let dir = reports_dir(cfg);
    std::fs::create_dir_all(&dir)?;
    let hash = log_resolved_config(cfg, &dir, "report")?;

    let dense_path = args
        .dense_csv
        .clone()
        .unwrap_or_else(|| dir.join("eval_dense.csv"));
    let method_path = args
        .method_csv
        .clone()
        .unwrap_or_else(|| dir.join("eval_amplified.csv"));
    let dense = read_eval_csv(&dense_path)?;
    let method = read_eval_csv(&method_path)?;
    let method_id = method
        .first()
        .map(|r| r.config_id.clone())
        .unwrap_or_else(|| "amplified".to_string());

    let mut csv = format!(
        "resolution,ffd_dense,ffd_{method_id},score_dense,score_{method_id}\n"
    );
    let mut observations = String::new();
    for d in &dense {
        let m = method
            .iter()
            .find(|m| m.resolution == d.resolution)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "method csv is missing resolution {}",
                    d.resolution
                ))
            })?;
        csv.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            d.resolution, d.ffd, m.ffd, d.mean_score, m.mean_score
        ));
        let ffd_dir = if m.ffd < d.ffd { "improved" } else { "not improved" };
        let score_dir = if m.mean_score > d.mean_score {
            "improved"
        } else {
            "not improved"
        };
        observations.push_str(&format!(
            "{}: ffd {:.4} -> {:.4} ({ffd_dir}); mean score {:.4} -> {:.4} ({score_dir})\n",
            d.resolution, d.ffd, m.ffd, d.mean_score, m.mean_score
        ));
    }
    write_text(&dir.join("report.csv"), &csv)?;
    write_text(
        &dir.join("report.txt"),
        &format!(
            "Observed quality per resolution, dense vs {method_id} (not asserted):\n{observations}"
        ),
    )?;

    // Side-by-side panel: one row per resolution, dense | method columns.
    let mut sizes = Vec::new();
    for d in &dense {
        sizes.push(parse_size(&d.resolution)?);
    }
    let h_max = sizes.iter().map(|s| s.0).max().unwrap_or(0);
    let w_max = sizes.iter().map(|s| s.1).max().unwrap_or(0);
    let mut grid_file = None;
    if h_max > 0 {
        let mut canvas = Tensor::filled(&[1, sizes.len() * h_max, 2 * w_max], -1.0);
        let mut any_tile = false;
        for (row, (h, w)) in sizes.iter().enumerate() {
            for (col, id) in ["dense", method_id.as_str()].into_iter().enumerate() {
                let path = dir.join("samples").join(format!("{id}_{h}x{w}.pgm"));
                if let Ok(tile) = read_pgm(&path) {
                    blit(&mut canvas, &tile, row * h_max, col * w_max);
                    any_tile = true;
                }
            }
        }
        if any_tile {
            let p = dir.join("report_grid.pgm");
            write_pgm(&canvas, &p)?;
            grid_file = Some(p.to_string_lossy().to_string());
        }
    }

    let summary = json!({
        "report": dir.join("report.csv").to_string_lossy(),
        "observations": dir.join("report.txt").to_string_lossy(),
        "grid": grid_file,
        "resolutions": dense.len(),
        "config_hash": hash,
    });
    Ok(summary)
}

pub struct DatasetArgs {
    pub size: Option<String>,
    pub n: usize,
    pub out_dir: Option<PathBuf>,
}

pub fn cmd_dataset_dump(cfg: &RunConfig, args: &DatasetArgs) -> Result<Value> {
    let out_dir = args
        .out_dir
        .clone()
        .unwrap_or_else(|| reports_dir(cfg).join("dataset"));
    std::fs::create_dir_all(&out_dir)?;
    let hash = log_resolved_config(cfg, &out_dir, "dataset")?;

    let (h, w) = parse_size(
        args.size
            .as_deref()
            .unwrap_or(&format!("{}x{}", cfg.model.train_h, cfg.model.train_w)),
    )?;
    let classes = cfg.classes(&cfg.data.classes)?;
    let samples = make_dataset(&classes, args.n, h, w, cfg.data.seed, cfg.data.jitter)?;

    let mut index = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let name = format!("sample_{i:04}_{}.pgm", s.class.id());
        write_pgm(&s.image, &out_dir.join(&name))?;
        index.push(json!({
            "file": name,
            "class": s.class.id(),
            "seed": s.seed,
            "H": h,
            "W": w,
        }));
    }
    write_text(
        &out_dir.join("index.json"),
        &serde_json::to_string_pretty(&Value::Array(index))?,
    )?;

    let summary = json!({
        "out_dir": out_dir.to_string_lossy(),
        "count": samples.len(),
        "size": format!("{h}x{w}"),
        "config_hash": hash,
    });
    Ok(summary)
}

