//! One function per subcommand. Each validates its inputs, writes the
//! resolved-config snapshot next to its outputs, does the work through
//! lde-core, and prints a short summary to stdout. Progress diagnostics go
//! through `log` (enable with `LDE_LOG=info`).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use lde_core::data::{parse_manifest, split, synth_generate, SplitRatios};
use lde_core::error::{LdeError, Result};
use lde_core::eval::{evaluate, read_embeddings, write_embeddings, EmbeddingRow, EvalReport};
use lde_core::eval::items_from_records;
use lde_core::model::{params_from_checkpoint, Checkpoint};
use lde_core::rng::Rng;
use lde_core::train::{embed_records, load_train_set, model_part, TrainLogRow, TrainState};
use lde_core::verify::{all_passed, render_table, run_checks_with, Fault, Level};

use crate::config::{write_snapshot, AppConfig};

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| LdeError::io(dir.display().to_string(), e))
}

pub fn cmd_gen(app: AppConfig, out: &Path) -> Result<()> {
    app.gen.validate()?;
    mkdir(out)?;
    write_snapshot(out, "gen", &[], &app)?;
    log::info!(
        "rendering {} images ({} domains x {} ids x {} imgs) at {}px",
        app.gen.total_images(),
        app.gen.num_domains,
        app.gen.ids_per_domain,
        app.gen.imgs_per_id,
        app.gen.size
    );
    let t0 = Instant::now();
    let summary = synth_generate(&app.gen, out, &Rng::new(app.gen.seed))?;
    log::info!("generation took {:.2}s", t0.elapsed().as_secs_f64());
    println!(
        "generated {} images across {} identities in {} domains",
        summary.images, summary.identities, summary.domains
    );
    println!("manifest: {}", summary.manifest.display());
    Ok(())
}

pub fn cmd_split(
    mut app: AppConfig,
    out: &Path,
    manifest: &Path,
    protocol: Option<&str>,
) -> Result<()> {
    if let Some(p) = protocol {
        app.split.protocol = p.parse()?;
    }
    let records = parse_manifest(manifest)?;
    mkdir(out)?;
    write_snapshot(out, "split", &[("manifest", manifest.display().to_string())], &app)?;
    let result = split(
        &records,
        app.split.protocol,
        SplitRatios { train: app.split.train_ratio },
        app.split.seed,
    )?;
    result.save(out)?;
    println!(
        "{}: {} train / {} query / {} gallery records ({} dropped)",
        app.split.protocol,
        result.train.len(),
        result.query.len(),
        result.gallery.len(),
        result.dropped.len()
    );
    println!("split files: {}", out.display());
    Ok(())
}

pub fn cmd_train(
    mut app: AppConfig,
    out: &Path,
    data_root: &Path,
    split_dir: &Path,
    resume: Option<&Path>,
    lambda: Option<f64>,
) -> Result<()> {
    // A resumed run is governed by the checkpoint's configuration, not the
    // config file; explicit flags still win so ablations can fork a run.
    let mut resumed = match resume {
        Some(path) => Some(TrainState::load(path)?),
        None => None,
    };
    if let Some(state) = &mut resumed {
        if let Some(l) = lambda {
            state.cfg.loss.lambda = l;
        }
        app.model = state.model_cfg.clone();
        app.train = state.cfg.clone();
    } else if let Some(l) = lambda {
        app.train.loss.lambda = l;
    }

    let records = parse_manifest(&split_dir.join("train.jsonl"))?;
    log::info!("loading {} train images from {}", records.len(), data_root.display());
    let set = load_train_set(data_root, &records, app.train.scenes_per_domain)?;

    let mut state = match resumed {
        Some(state) => state,
        None => {
            // The classifier head must match the split, so its size is
            // always derived from the train records.
            app.model.classes = set.num_classes();
            TrainState::new(app.model.clone(), app.train.clone())?
        }
    };
    mkdir(out)?;
    let mut args: Vec<(&str, String)> = vec![
        ("data", data_root.display().to_string()),
        ("split", split_dir.display().to_string()),
    ];
    if let Some(path) = resume {
        args.push(("resume", path.display().to_string()));
    }
    write_snapshot(out, "train", &args, &app)?;

    let log_path = out.join("train_log.csv");
    let file =
        fs::File::create(&log_path).map_err(|e| LdeError::io(log_path.display().to_string(), e))?;
    let mut csv = BufWriter::new(file);
    writeln!(csv, "{}", TrainLogRow::csv_header())
        .map_err(|e| LdeError::io(log_path.display().to_string(), e))?;

    let every = state.cfg.checkpoint_every;
    let rolling = out.join("checkpoint.ckpt");
    let start = state.n;
    let total = state.cfg.iters;
    log::info!("training iterations {}..{} (batch {})", start + 1, total, state.cfg.batch_size());
    let t0 = Instant::now();
    let rows = lde_core::train::run(&mut state, &set, |st, row| {
        writeln!(csv, "{}", row.csv_row())
            .map_err(|e| LdeError::io(log_path.display().to_string(), e))?;
        if every > 0 && st.n.is_multiple_of(every) && st.n < total {
            st.save(&rolling)?;
        }
        if st.n.is_multiple_of(100) || st.n == total {
            log::info!(
                "iter {:>5}/{} lr {:.3e} total {:.4} (ce {:.4} trace {:.4} triplet {:.4})",
                row.iteration,
                total,
                row.lr,
                row.total,
                row.ce,
                row.trace_term,
                row.triplet
            );
        }
        Ok(())
    })?;
    csv.flush().map_err(|e| LdeError::io(log_path.display().to_string(), e))?;
    let model_path = out.join("model.ckpt");
    state.save(&model_path)?;
    log::info!("{} iterations took {:.2}s", rows.len(), t0.elapsed().as_secs_f64());

    match rows.last() {
        Some(last) => println!(
            "trained to iteration {}: total {:.6} (ce {:.6} trace {:.6} triplet {:.6})",
            state.n, last.total, last.ce, last.trace_term, last.triplet
        ),
        None => println!("checkpoint already at iteration {}; nothing to train", state.n),
    }
    println!("checkpoint: {}", model_path.display());
    println!("log: {}", log_path.display());
    Ok(())
}

pub fn cmd_embed(
    mut app: AppConfig,
    out: &Path,
    checkpoint: &Path,
    manifest: &Path,
    data_root: &Path,
) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (model_cfg, params) = params_from_checkpoint(&model_part(&ckpt))?;
    app.model = model_cfg.clone();
    let records = parse_manifest(manifest)?;
    mkdir(out)?;
    write_snapshot(
        out,
        "embed",
        &[
            ("checkpoint", checkpoint.display().to_string()),
            ("manifest", manifest.display().to_string()),
            ("data", data_root.display().to_string()),
        ],
        &app,
    )?;
    log::info!("embedding {} records", records.len());
    let t0 = Instant::now();
    let embeddings = embed_records(data_root, &records, &params, &model_cfg)?;
    log::info!("embedding took {:.2}s", t0.elapsed().as_secs_f64());
    let rows: Vec<EmbeddingRow> = records
        .iter()
        .zip(embeddings)
        .map(|(rec, emb)| EmbeddingRow { path: rec.path.clone(), embedding: emb })
        .collect();
    let path = out.join("embeddings.jsonl");
    write_embeddings(&path, &rows)?;
    println!("embedded {} records", rows.len());
    println!("embeddings: {}", path.display());
    Ok(())
}

pub fn cmd_eval(
    app: AppConfig,
    out: &Path,
    embeddings: &Path,
    query: &Path,
    gallery: &Path,
) -> Result<()> {
    let rows = read_embeddings(embeddings)?;
    let query_records = parse_manifest(query)?;
    let gallery_records = parse_manifest(gallery)?;
    let queries = items_from_records(&query_records, &rows)?;
    let gallery_items = items_from_records(&gallery_records, &rows)?;
    mkdir(out)?;
    write_snapshot(
        out,
        "eval",
        &[
            ("embeddings", embeddings.display().to_string()),
            ("query", query.display().to_string()),
            ("gallery", gallery.display().to_string()),
        ],
        &app,
    )?;
    let report = evaluate(&queries, &gallery_items)?;
    let json_path = out.join("report.json");
    fs::write(&json_path, report.to_json() + "\n")
        .map_err(|e| LdeError::io(json_path.display().to_string(), e))?;
    let csv_path = out.join("report.csv");
    fs::write(&csv_path, format!("{}\n{}\n", EvalReport::csv_header(), report.csv_row()))
        .map_err(|e| LdeError::io(csv_path.display().to_string(), e))?;
    println!(
        "mAP {:.4}  Rank-1 {:.4}  Rank-5 {:.4}  Rank-10 {:.4}  ({} queries scored, {} dropped)",
        report.map, report.cmc.r1, report.cmc.r5, report.cmc.r10, report.num_queries,
        report.num_dropped
    );
    println!("reports: {} / {}", json_path.display(), csv_path.display());
    Ok(())
}

pub fn cmd_verify(
    app: AppConfig,
    out: &Path,
    level: &str,
    inject_fault: Option<&str>,
) -> Result<()> {
    let level: Level = level.parse()?;
    let fault: Option<Fault> = inject_fault.map(str::parse).transpose()?;
    mkdir(out)?;
    let fault_arg = fault.map_or_else(|| "none".to_string(), |f| f.to_string());
    write_snapshot(
        out,
        "verify",
        &[("level", level.to_string()), ("inject_fault", fault_arg)],
        &app,
    )?;
    let rows = run_checks_with(level, fault);
    let table = render_table(&rows);
    print!("{table}");
    let report_path = out.join("verify_report.txt");
    fs::write(&report_path, &table)
        .map_err(|e| LdeError::io(report_path.display().to_string(), e))?;
    if all_passed(&rows) {
        println!("all {} checks passed", rows.len());
        Ok(())
    } else {
        let failed = rows.iter().filter(|r| !r.passed).count();
        Err(LdeError::numeric(format!("{failed} verification check(s) failed")))
    }
}
