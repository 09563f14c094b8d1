use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::Parser;
use log::info;

use pgtr::backbone::BackboneVariant;
use pgtr::data::{write_id_maps, write_interactions, BipartiteGraph};
use pgtr::encoding::{added_parameter_formula, GroupAssignment, PositionalEncodingSet};
use pgtr::experiments::{
    finish, fit, prepare, run_ablation, run_lambda3, run_noise, run_sparsity, Command,
    ExperimentSpec, MetricRow, OutputRecord,
};
use pgtr::metrics::evaluate;
use pgtr::model::PgtrModel;
use pgtr::numerics::{DenseMatrix, EigenOptions, PageRankOptions, ParamStore};

/// Position-aware graph transformer recommender.
///
/// Without `--data` the clustered synthetic generator is used. Set
/// RAYON_NUM_THREADS to cap parallelism.
#[derive(Parser, Debug)]
#[command(name = "pgtr", version)]
struct Args {
    /// Interaction file: one `user item` pair per line.
    #[arg(long)]
    data: Option<PathBuf>,
    /// train | evaluate | ablate | sparsity | noise | lambda3 | encode | params
    #[arg(long, default_value = "train")]
    command: Command,
    /// Start from a saved experiment snapshot; other flags override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    train_fraction: Option<f64>,
    /// Proportion of random unobserved items added per user.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    lambda3: Option<f64>,
    #[arg(long)]
    lambda_c: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    emb_dim: Option<usize>,
    #[arg(long)]
    hc: Option<usize>,
    #[arg(long)]
    hd: Option<usize>,
    #[arg(long)]
    hr: Option<usize>,
    #[arg(long)]
    hy: Option<usize>,
    #[arg(long)]
    nd: Option<usize>,
    #[arg(long)]
    nr: Option<usize>,
    /// Random features per attention layer.
    #[arg(long)]
    m_features: Option<usize>,
    /// pl | dg | pr | tp; repeat or comma-separate.
    #[arg(long, value_delimiter = ',')]
    disable_encoding: Vec<String>,
    /// lightgcn | transform-gcn
    #[arg(long)]
    backbone: Option<BackboneVariant>,
    /// Exact softmax attention (quadratic; small graphs only).
    #[arg(long)]
    exact_attention: bool,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Checkpoint to score with `--command evaluate`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Run sweep points concurrently.
    #[arg(long)]
    parallel: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl Args {
    fn to_spec(&self) -> Result<ExperimentSpec> {
        let mut spec = match &self.spec {
            Some(path) => ExperimentSpec::load(path)?,
            None => ExperimentSpec::default(),
        };
        spec.command = self.command;
        if let Some(seed) = self.seed {
            spec = spec.with_seed(seed);
        }
        if self.data.is_some() {
            spec.data = self.data.clone();
        }
        spec.out = self.out.clone();
        spec.parallel |= self.parallel;

        let m = &mut spec.model;
        set(&mut m.lambda1, self.lambda1);
        set(&mut m.lambda2, self.lambda2);
        set(&mut m.lambda3, self.lambda3);
        set(&mut m.tau, self.tau);
        set(&mut m.layers, self.layers);
        set(&mut m.dim, self.emb_dim);
        set(&mut m.backbone, self.backbone);
        set(&mut m.attention.features, self.m_features);
        m.attention.exact |= self.exact_attention;
        let e = &mut m.encoding;
        set(&mut e.lambda_c, self.lambda_c);
        set(&mut e.h_c, self.hc);
        set(&mut e.h_d, self.hd);
        set(&mut e.h_r, self.hr);
        set(&mut e.h_y, self.hy);
        set(&mut e.n_d, self.nd);
        set(&mut e.n_r, self.nr);
        for label in &self.disable_encoding {
            e.flags.disable(label)?;
        }
        m.validate()?;

        set(&mut spec.split.train_fraction, self.train_fraction);
        set(&mut spec.noise, self.noise);
        let t = &mut spec.train;
        set(&mut t.lr, self.lr);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.max_epochs, self.max_epochs);
        set(&mut t.patience, self.patience);
        if !(0.0..1.0).contains(&spec.noise) {
            bail!("--noise must lie in [0, 1)");
        }
        Ok(spec)
    }
}

fn set<T>(field: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *field = v;
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let spec = args.to_spec()?;
    fs::create_dir_all(&spec.out).with_context(|| format!("creating {}", spec.out.display()))?;

    match spec.command {
        Command::Train => train(&spec)?,
        Command::Evaluate => {
            let path = args
                .checkpoint
                .as_deref()
                .context("--command evaluate needs --checkpoint")?;
            evaluate_checkpoint(&spec, path)?;
        }
        Command::Ablate => report(run_ablation(&spec)?, &spec.out)?,
        Command::Sparsity => report(run_sparsity(&spec)?, &spec.out)?,
        Command::Noise => report(run_noise(&spec)?, &spec.out)?,
        Command::Lambda3 => report(run_lambda3(&spec)?, &spec.out)?,
        Command::Encode => encode(&spec)?,
        Command::Params => params(&spec)?,
    }
    Ok(())
}

fn report(record: OutputRecord, out: &Path) -> Result<()> {
    let (csv, json) = record.write(out)?;
    println!("{:<10} {:>10} {:>10}", "setting", "recall@K", "ndcg@K");
    for r in &record.rows {
        match r.recall_drop_pct {
            Some(drop) => println!(
                "{:<10} {:>10.4} {:>10.4}  (-{drop:.1}%)",
                r.setting, r.recall, r.ndcg
            ),
            None => println!("{:<10} {:>10.4} {:>10.4}", r.setting, r.recall, r.ndcg),
        }
    }
    info!(
        "{} finished in {:.1}s; wrote {} and {}",
        record.id,
        record.runtime_seconds,
        csv.display(),
        json.display()
    );
    Ok(())
}

fn train(spec: &ExperimentSpec) -> Result<()> {
    let start = Instant::now();
    let (data, split, train_set) = prepare(spec)?;
    info!(
        "{} users, {} items; {} train / {} validation / {} test records",
        data.n_users(),
        data.n_items(),
        train_set.len(),
        split.validation.len(),
        split.test.len()
    );
    let (model, outcome) = fit(&train_set, &split, &spec.model, &spec.train)?;
    let test = evaluate(
        &model,
        &[&train_set, &split.validation],
        &split.test,
        spec.train.k,
    )?;

    let out = &spec.out;
    write_interactions(out.join("train.txt"), &train_set)?;
    write_interactions(out.join("validation.txt"), &split.validation)?;
    write_interactions(out.join("test.txt"), &split.test)?;
    if let Some(ids) = data.ids() {
        write_id_maps(out.join("user_ids.txt"), out.join("item_ids.txt"), ids)?;
    }
    let mut history = csv::Writer::from_path(out.join("history.csv"))?;
    for rec in &outcome.history {
        history.serialize(rec)?;
    }
    history.flush()?;
    model.save_checkpoint(out.join("model.ckpt"))?;
    info!(
        "best validation recall {:.4} at epoch {}",
        outcome.best_val_recall, outcome.best_epoch
    );

    let row = MetricRow {
        setting: "pgtr".into(),
        recall: test.recall,
        ndcg: test.ndcg,
        recall_drop_pct: None,
        ndcg_drop_pct: None,
        val_recall: outcome.best_val_recall,
        best_epoch: outcome.best_epoch,
    };
    report(finish("train", spec, vec![row], start), out)
}

fn evaluate_checkpoint(spec: &ExperimentSpec, path: &Path) -> Result<()> {
    let start = Instant::now();
    let (_, split, train_set) = prepare(spec)?;
    let graph = BipartiteGraph::build(&train_set)?;
    let model = PgtrModel::load_checkpoint(path, &graph)?;
    let test = evaluate(
        &model,
        &[&train_set, &split.validation],
        &split.test,
        spec.train.k,
    )?;
    let row = MetricRow {
        setting: "checkpoint".into(),
        recall: test.recall,
        ndcg: test.ndcg,
        recall_drop_pct: None,
        ndcg_drop_pct: None,
        val_recall: f64::NAN,
        best_epoch: 0,
    };
    report(finish("evaluate", spec, vec![row], start), &spec.out)
}

fn write_matrix(w: &mut impl Write, name: &str, m: &DenseMatrix) -> std::io::Result<()> {
    writeln!(w, "{} {} {name}", m.rows(), m.cols())?;
    for r in 0..m.rows() {
        let line: Vec<String> = m.row(r).iter().map(|v| format!("{v:.17e}")).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}

/// `node group` lines in joint numbering (users first, then items).
fn write_groups(path: &Path, users: &GroupAssignment, items: &GroupAssignment) -> Result<()> {
    let mut w =
        BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    let n = users.group_of.len();
    for (u, g) in users.group_of.iter().enumerate() {
        writeln!(w, "{u} {g}")?;
    }
    for (i, g) in items.group_of.iter().enumerate() {
        writeln!(w, "{} {g}", n + i)?;
    }
    w.flush()?;
    Ok(())
}

fn encode(spec: &ExperimentSpec) -> Result<()> {
    let (_, _, train_set) = prepare(spec)?;
    let graph = BipartiteGraph::build(&train_set)?;
    let mut store = ParamStore::new();
    let eigen = EigenOptions {
        seed: spec.model.seed,
        ..EigenOptions::default()
    };
    let enc = PositionalEncodingSet::build(
        &graph,
        &spec.model.encoding,
        spec.model.dim,
        &mut store,
        spec.model.seed,
        &eigen,
        &PageRankOptions::default(),
    )?;
    let out = &spec.out;
    if let Some(spectral) = &enc.spectral {
        let path = out.join("spectral.txt");
        let mut w = BufWriter::new(
            File::create(&path).with_context(|| format!("creating {}", path.display()))?,
        );
        write_matrix(&mut w, "spectral", spectral)?;
        w.flush()?;
    }
    if let (Some(u), Some(i)) = (&enc.degree_user, &enc.degree_item) {
        write_groups(&out.join("degree_groups.txt"), u, i)?;
    }
    if let (Some(u), Some(i)) = (&enc.pagerank_user, &enc.pagerank_item) {
        write_groups(&out.join("pagerank_groups.txt"), u, i)?;
    }
    info!(
        "encodings for {} nodes written to {}",
        enc.n_nodes(),
        out.display()
    );
    Ok(())
}

fn params(spec: &ExperimentSpec) -> Result<()> {
    let (_, _, train_set) = prepare(spec)?;
    let graph = BipartiteGraph::build(&train_set)?;
    let model = PgtrModel::new(&graph, &spec.model)?;
    let added = model.count_added_parameters();
    let formula = added_parameter_formula(&spec.model.encoding, spec.model.dim);
    let embedding = graph.n_nodes() * spec.model.dim;
    println!("embedding parameters {embedding}");
    println!("added parameters     {added}");
    println!("closed form          {formula}");
    let plain =
        spec.model.backbone == BackboneVariant::LightGcn && !spec.model.attention.use_projections;
    if plain && added != formula {
        bail!("parameter count {added} differs from the closed form {formula}");
    }
    Ok(())
}
