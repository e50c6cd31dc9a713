use std::path::{Path, PathBuf};

use ssn_core::compose::query_gates;
use ssn_core::datamodel::{load_store, save_store, synth_generate, SynthConfig};
use ssn_core::heatmap::export_gate_grid;
use ssn_core::retrieval::{build_index, evaluate_with_index, query as rank_query, sensitivity_probe, EvalOptions};
use ssn_core::trainer::{write_loss_csv, Trainer};
use ssn_core::{Checkpoint, FeatureStore, Result, SsnError};

use crate::config::{self, RunConfig};
use crate::Common;

/// Config file plus flag overrides, validated.
fn settings(common: &Common) -> Result<RunConfig> {
    let loaded = config::load(common.config.as_deref())?;
    let ci = std::env::var_os("CI").is_some_and(|v| !v.is_empty());
    if ci && common.seed.is_none() && !loaded.has_seed {
        return Err(SsnError::Config("--seed is required when CI is set".into()));
    }
    let mut c = loaded.config;
    macro_rules! apply {
        ($($field:ident),*) => {$(
            if let Some(v) = common.$field.clone() {
                c.$field = v;
            }
        )*};
    }
    apply!(seed, variant, epochs, lr, batch_size, lr_decay_every, heads, use_kl, out_dir);
    if common.train_data.is_some() {
        c.train_data = common.train_data.clone();
    }
    if common.eval_data.is_some() {
        c.eval_data = common.eval_data.clone();
    }
    c.exclude_reference |= common.exclude_reference;
    c.validate()?;
    Ok(c)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| SsnError::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| SsnError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn required<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| SsnError::Config(format!("{key} is not set (config key or --{})", key.replace('_', "-"))))
}

/// Evaluation data, falling back to the training data.
fn query_data(c: &RunConfig) -> Result<FeatureStore> {
    match (&c.eval_data, &c.train_data) {
        (Some(p), _) | (None, Some(p)) => load_store(p),
        (None, None) => Err(SsnError::Config("eval_data is not set (config key or --eval-data)".into())),
    }
}

fn load_checkpoint(c: &RunConfig, path: Option<&Path>) -> Result<Checkpoint> {
    let default = c.out_dir.join("checkpoint.ssnc");
    Checkpoint::load(path.unwrap_or(&default))
}

pub fn synth(common: &Common, n_train: usize, synth_config: Option<&Path>) -> Result<()> {
    let loaded = config::load(common.config.as_deref())?;
    let c = settings(common)?;
    let mut sc: SynthConfig = match synth_config {
        None => SynthConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| SsnError::Config(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| SsnError::Config(format!("synth config: {e}")))?
        }
    };
    if common.seed.is_some() || loaded.has_seed {
        sc.seed = c.seed;
    }
    let store = synth_generate(&sc)?;
    let (train, test) = store.split_at(n_train)?;
    create_dir(&c.out_dir)?;
    let (tp, ep) = (c.out_dir.join("train.ssnf"), c.out_dir.join("test.ssnf"));
    save_store(&train, &tp)?;
    save_store(&test, &ep)?;
    println!(
        "seed {}: {} items, {} train / {} test triplets -> {}, {}",
        sc.seed,
        store.items().len(),
        train.triplets().len(),
        test.triplets().len(),
        tp.display(),
        ep.display()
    );
    Ok(())
}

pub fn train(common: &Common, resume: Option<&Path>) -> Result<()> {
    let c = settings(common)?;
    let store = load_store(required(&c.train_data, "train_data")?)?;
    let mut trainer = match resume {
        None => Trainer::new(&store, c.train_config())?,
        Some(p) => {
            let mut t = Trainer::resume(&store, Checkpoint::load(p)?)?;
            if let Some(e) = common.epochs {
                t.set_epochs(e);
            }
            t
        }
    };
    let total = trainer.config().epochs;
    trainer.run_with(|t| {
        if let Some(r) = t.history().last() {
            eprintln!("epoch {}/{total} loss {:.6} lr {:.3e}", t.epoch(), r.total, r.lr);
        }
        Ok(())
    })?;
    create_dir(&c.out_dir)?;
    let ckpt = c.out_dir.join("checkpoint.ssnc");
    trainer.checkpoint().save(&ckpt)?;
    write_loss_csv(trainer.history(), c.out_dir.join("loss.csv"))?;
    println!("{} steps over {} epochs -> {}", trainer.global_step(), trainer.epoch(), ckpt.display());
    Ok(())
}

pub fn eval(common: &Common, checkpoint: Option<&Path>, sigma: Option<f64>) -> Result<()> {
    let c = settings(common)?;
    let ckpt = load_checkpoint(&c, checkpoint)?;
    let store = load_store(required(&c.eval_data, "eval_data")?)?;
    let opts = EvalOptions {
        ks: c.recall_ks.clone(),
        subset_ks: c.subset_ks.clone(),
        exclude_reference: c.exclude_reference,
    };
    let index = build_index(&store, &ckpt.params)?;
    let (report, _) = evaluate_with_index(&store, &index, &ckpt.params, &opts)?;
    create_dir(&c.out_dir)?;
    write(&c.out_dir.join("report.json"), &report.to_json())?;
    write(&c.out_dir.join("report.txt"), &report.table())?;
    print!("{}", report.table());
    if let Some(sigma) = sigma {
        let (_, noised) = sensitivity_probe(&store, &ckpt.params, sigma, c.seed, &opts)?;
        write(&c.out_dir.join("report_noised.json"), &noised.to_json())?;
        println!("reference noise sigma={sigma}:");
        print!("{}", noised.table());
    }
    if c.heatmap && ckpt.params.config().variant.decomposes() {
        let dir = c.out_dir.join("heatmaps");
        create_dir(&dir)?;
        for t in store.triplets() {
            let (_, gate) = query_gates(store.item(t.reference_id)?, store.item(t.text_id)?, &ckpt.params)?;
            export_gate_grid(&gate, None, c.heatmap_upscale, &dir, t.text_id)?;
        }
    }
    Ok(())
}

pub fn query(common: &Common, checkpoint: Option<&Path>, reference: u64, text: u64, top_k: usize) -> Result<()> {
    let c = settings(common)?;
    let ckpt = load_checkpoint(&c, checkpoint)?;
    let store = query_data(&c)?;
    let index = build_index(&store, &ckpt.params)?;
    let list = rank_query(store.item(reference)?, store.item(text)?, &index, &ckpt.params)?;
    let list = if c.exclude_reference { list.without(reference) } else { list };
    for (rank, (id, score)) in list.ids.iter().zip(&list.scores).take(top_k).enumerate() {
        println!("{}\t{id}\t{score:.6}", rank + 1);
    }
    Ok(())
}

fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let bad = || SsnError::Argument(format!("grid must look like 7x7, got {s:?}"));
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((w.parse().map_err(|_| bad())?, h.parse().map_err(|_| bad())?))
}

pub fn heatmap(
    common: &Common,
    checkpoint: Option<&Path>,
    queries: &[u64],
    grid: Option<&str>,
    upscale: Option<usize>,
) -> Result<()> {
    let c = settings(common)?;
    let ckpt = load_checkpoint(&c, checkpoint)?;
    let store = query_data(&c)?;
    let shape = grid.map(parse_grid).transpose()?;
    let trips: Vec<_> = if queries.is_empty() {
        store.triplets().iter().collect()
    } else {
        queries
            .iter()
            .map(|&q| {
                store
                    .triplets()
                    .iter()
                    .find(|t| t.text_id == q)
                    .ok_or_else(|| SsnError::Data(format!("no triplet with text id {q}")))
            })
            .collect::<Result<_>>()?
    };
    create_dir(&c.out_dir)?;
    for t in trips {
        let (_, gate) = query_gates(store.item(t.reference_id)?, store.item(t.text_id)?, &ckpt.params)?;
        let path = export_gate_grid(&gate, shape, upscale.unwrap_or(c.heatmap_upscale), &c.out_dir, t.text_id)?;
        println!("{}", path.display());
    }
    Ok(())
}

pub fn gradcheck(common: &Common, precision: &str, tolerance: f64) -> Result<()> {
    let c = settings(common)?;
    if precision != "f64" {
        return Err(SsnError::Argument(format!("gradcheck runs in f64 only, got {precision}")));
    }
    let cfg = ssn_core::trainer::GradCheckConfig {
        seed: c.seed,
        ..Default::default()
    };
    let report = ssn_core::trainer::model_gradcheck(&cfg)?;
    for p in &report.per_param {
        let note = if p.vanishing { "  (zero gradient, error relative to the full gradient)" } else { "" };
        println!("{:24} {:.3e}{note}", p.name, p.error);
    }
    let (name, worst) = report.worst();
    println!("worst relative error: {worst:.3e} ({name})");
    if worst > tolerance {
        return Err(SsnError::Numeric(format!(
            "gradient of {name} differs from finite differences by {worst:.3e} > {tolerance:.1e}"
        )));
    }
    Ok(())
}
