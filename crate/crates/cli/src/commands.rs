use std::path::{Path, PathBuf};

use bayesduo_core::active::{
    curve_auc, run_active_learning, AcquisitionConfig, AcquisitionKind, ActiveConfig, ActiveProblem, KnnMetric,
};
use bayesduo_core::io::{load_labels, load_matrix, save_labels, save_matrix};
use bayesduo_core::laplace::{
    assemble_posterior, assemble_tuned, default_tau_grid, fit_factors, load_posterior, save_posterior,
    tune_pseudo_count, PosteriorMeta,
};
use bayesduo_core::metrics::evaluate;
use bayesduo_core::probcosine::{
    entropy, mc_cosine_oracle, mc_predictive_oracle, probcosine_moments, probit_for_embedding, total_variation,
};
use bayesduo_core::rng::substream;
use bayesduo_core::synthetic::generate_synthetic;
use bayesduo_core::{
    DatasetManifest, EmbeddingMatrix, Error, GaussianEmbedding, KfacPosterior, Result,
};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::table::{fmt_num, Table};
use crate::{ActiveArgs, EvalArgs, FitArgs, OracleArgs, PredictArgs, SynthArgs, TuneArgs};

const IMAGE_DIR: &str = "image";
const TEXT_DIR: &str = "text";

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
        })
    }
}

fn write_json_file<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| crate::table::io_error(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| crate::table::io_error(path, e))
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Corrupt(m) => Error::Corrupt(format!("{}: {m}", path.display())),
        Error::Value(m) => Error::Value(format!("{}: {m}", path.display())),
        Error::Arg(m) => Error::Arg(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn load_features(path: &Path) -> Result<DMatrix<f64>> {
    require(path)?;
    with_path(path, load_matrix(path)).map(|m| m.to_dmatrix())
}

fn load_pair(dir: &Path) -> Result<((KfacPosterior, PosteriorMeta), (KfacPosterior, PosteriorMeta))> {
    require(dir)?;
    let image_dir = dir.join(IMAGE_DIR);
    let text_dir = dir.join(TEXT_DIR);
    let image = with_path(&image_dir, load_posterior(&image_dir))?;
    let text = with_path(&text_dir, load_posterior(&text_dir))?;
    if image.0.d_out() != text.0.d_out() {
        return Err(Error::Arg(format!(
            "{}: image and text posteriors disagree on the embedding size",
            dir.display()
        )));
    }
    Ok((image, text))
}

fn check_width(path: &Path, m: &DMatrix<f64>, expected: usize) -> Result<()> {
    if m.ncols() != expected {
        return Err(Error::Arg(format!(
            "{}: {} columns, expected {expected}",
            path.display(),
            m.ncols()
        )));
    }
    Ok(())
}

fn class_gaussians(text: &KfacPosterior, path: &Path) -> Result<Vec<GaussianEmbedding>> {
    let class_text = load_features(path)?;
    check_width(path, &class_text, text.d_in())?;
    if class_text.nrows() == 0 {
        return Err(Error::Arg(format!("{}: no classes", path.display())));
    }
    text.embed_all(&class_text)
}

fn load_dataset(path: &Path, n_classes: usize, d_in: usize) -> Result<(DMatrix<f64>, Vec<usize>)> {
    require(path)?;
    let data = with_path(path, DatasetManifest::load(path))?;
    with_path(path, data.check_classes(n_classes))?;
    let labels = with_path(path, data.labels())?.to_vec();
    let features = data.features.to_dmatrix();
    check_width(path, &features, d_in)?;
    Ok((features, labels))
}

fn fit_side(
    features: &DMatrix<f64>,
    other: &DMatrix<f64>,
    map: &DMatrix<f64>,
    meta: &mut PosteriorMeta,
    batch_size: usize,
) -> Result<KfacPosterior> {
    let (factors, loglik) =
        fit_factors(features, other, map, meta.temperature, meta.bias, meta.loss, batch_size)?;
    meta.loglik = loglik;
    assemble_posterior(map.clone(), factors, 1.0, 1.0)
}

pub fn fit(args: &FitArgs) -> Result<()> {
    require(&args.bundle)?;
    let bundle = with_path(&args.bundle, bayesduo_core::ModelBundle::load(&args.bundle))?;
    let img = load_features(&args.features_img)?;
    let txt = load_features(&args.features_txt)?;
    let p = bundle.proj_image.to_dmatrix();
    let q = bundle.proj_text.to_dmatrix();
    check_width(&args.features_img, &img, p.ncols())?;
    check_width(&args.features_txt, &txt, q.ncols())?;
    if img.nrows() != txt.nrows() {
        return Err(Error::Arg(format!(
            "{} has {} rows but {} has {}",
            args.features_img.display(),
            img.nrows(),
            args.features_txt.display(),
            txt.nrows()
        )));
    }
    if img.nrows() == 0 {
        return Err(Error::Arg(format!("{}: no rows", args.features_img.display())));
    }
    let batch = args.batch_size.unwrap_or(img.nrows());
    if batch == 0 {
        return Err(Error::Arg("--batch-size must be at least 1".into()));
    }
    let base = PosteriorMeta {
        loss: bundle.loss,
        temperature: bundle.temperature,
        bias: bundle.bias,
        loglik: 0.0,
    };
    let img_emb = &img * p.transpose();
    let txt_emb = &txt * q.transpose();

    let mut image_meta = base;
    let image = fit_side(&img, &txt_emb, &p, &mut image_meta, batch)?;
    let mut text_meta = base;
    let text = fit_side(&txt, &img_emb, &q, &mut text_meta, batch)?;
    save_posterior(&image, &image_meta, args.out.join(IMAGE_DIR))?;
    save_posterior(&text, &text_meta, args.out.join(TEXT_DIR))?;
    log::info!("fitted {} pairs into {}", img.nrows(), args.out.display());
    Ok(())
}

#[derive(Serialize)]
struct TuneReport {
    tau: f64,
    lam_image: f64,
    lam_text: f64,
    converged: bool,
    curve: Vec<(f64, f64)>,
}

pub fn tune(args: &TuneArgs) -> Result<()> {
    let ((image, image_meta), (text, text_meta)) = load_pair(&args.posterior)?;
    let class_text = load_features(&args.class_text)?;
    check_width(&args.class_text, &class_text, text.d_in())?;
    let (val_x, val_y) = load_dataset(&args.val, class_text.nrows(), image.d_in())?;
    let grid = args.tau_grid.clone().unwrap_or_else(default_tau_grid);
    let build = |tau: f64| -> Result<((KfacPosterior, bool), (KfacPosterior, bool))> {
        let (img, fi) = assemble_tuned(
            image.projection().clone(),
            image.factors().clone(),
            image_meta.loglik,
            tau,
            1.0,
        )?;
        let (txt, ft) =
            assemble_tuned(text.projection().clone(), text.factors().clone(), text_meta.loglik, tau, 1.0)?;
        Ok(((img, fi.converged), (txt, ft.converged)))
    };
    let search = tune_pseudo_count(
        |tau| {
            let ((img, _), (txt, _)) = build(tau)?;
            let classes = txt.embed_all(&class_text)?;
            Ok((img, classes))
        },
        &val_x,
        &val_y,
        image_meta.temperature,
        &grid,
    )?;
    let ((img, ci), (txt, ct)) = build(search.tau)?;
    save_posterior(&img, &image_meta, args.out.join(IMAGE_DIR))?;
    save_posterior(&txt, &text_meta, args.out.join(TEXT_DIR))?;
    let mut table = Table::new(["tau", "nlpd"]);
    for (tau, v) in &search.curve {
        table.push(vec![fmt_num(*tau), fmt_num(*v)]);
    }
    table.write(&args.out.join("tau_curve.csv"))?;
    let report = TuneReport {
        tau: search.tau,
        lam_image: img.lam(),
        lam_text: txt.lam(),
        converged: ci && ct,
        curve: search.curve,
    };
    write_json_file(&report, args.out.join("tune.json"))?;
    log::info!("selected tau {} (lambda image {}, text {})", report.tau, report.lam_image, report.lam_text);
    Ok(())
}

pub fn predict(args: &PredictArgs) -> Result<()> {
    let ((image, meta), (text, _)) = load_pair(&args.posterior)?;
    if image.tau() == 1.0 && image.lam() == 1.0 {
        log::warn!("posterior looks untuned (tau = lambda = 1); run `bayesduo tune` first");
    }
    let classes = class_gaussians(&text, &args.class_text)?;
    let features = load_features(&args.features)?;
    check_width(&args.features, &features, image.d_in())?;
    let c = classes.len();
    let mut table = Table::new((0..c).map(|k| format!("p{k}")).chain(["entropy".to_string()]));
    for e in image.embed_all(&features)? {
        let p = probit_for_embedding(&e, &classes, meta.temperature)?;
        let mut row: Vec<String> = p.probs().iter().map(|v| fmt_num(*v)).collect();
        row.push(fmt_num(entropy(p.probs())));
        table.push(row);
    }
    table.write(&args.out)
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    require(&args.probs)?;
    require(&args.labels)?;
    let probs = crate::table::read_probabilities(&args.probs)?;
    let labels = with_path(&args.labels, load_labels(&args.labels))?;
    if probs.len() != labels.len() {
        return Err(Error::Arg(format!(
            "{} has {} rows but {} has {} labels",
            args.probs.display(),
            probs.len(),
            args.labels.display(),
            labels.len()
        )));
    }
    let (report, bins) = evaluate(&probs, &labels, args.bins)?;
    write_json_file(&report, &args.out)?;
    if let Some(path) = &args.reliability {
        let mut table = Table::new(["bin_lo", "bin_hi", "count", "acc", "conf"]);
        for b in bins {
            table.push(vec![
                fmt_num(b.lo),
                fmt_num(b.hi),
                b.count.to_string(),
                fmt_num(b.acc),
                fmt_num(b.conf),
            ]);
        }
        table.write(path)?;
    }
    println!(
        "acc {:.4} (se {:.4})  weighted acc {:.4}  nlpd {:.4}  ece {:.4}",
        report.acc, report.acc_se, report.weighted_acc, report.nlpd, report.ece
    );
    Ok(())
}

pub fn active(args: &ActiveArgs) -> Result<()> {
    let ((image, meta), (text, _)) = load_pair(&args.posterior)?;
    let classes = class_gaussians(&text, &args.class_text)?;
    let (pool_x, pool_y) = load_dataset(&args.pool, classes.len(), image.d_in())?;
    let (test_x, test_y) = load_dataset(&args.test, classes.len(), image.d_in())?;
    let kinds: Vec<AcquisitionKind> = args.strategy.iter().map(|s| s.parse()).collect::<Result<_>>()?;
    let metric: KnnMetric = args.metric.parse()?;
    let problem = ActiveProblem {
        pool_features: pool_x,
        pool_labels: pool_y,
        test_features: test_x,
        test_labels: test_y,
        class_embeddings: classes,
        temperature: meta.temperature,
    };
    let mut table = Table::new(["budget", "weighted_acc", "nlpd", "strategy", "seed"]);
    for kind in kinds {
        for seed in args.seed..args.seed + args.repeats.max(1) {
            let cfg = ActiveConfig {
                acquisition: AcquisitionConfig {
                    kind,
                    n_theta_samples: args.n_theta,
                    n_target_samples: args.n_target,
                    metric,
                    seed,
                },
                budgets: args.budgets.clone(),
                gamma: args.gamma,
                beta: args.beta,
            };
            let run = run_active_learning(&problem, image.clone(), &cfg)?;
            log::info!("{kind} seed {seed}: area under curve {:.4}", curve_auc(&run.curve));
            for p in &run.curve {
                table.push(vec![
                    p.budget.to_string(),
                    fmt_num(p.weighted_acc),
                    fmt_num(p.nlpd),
                    kind.to_string(),
                    seed.to_string(),
                ]);
            }
        }
    }
    table.write(&args.out)
}

pub fn oracle(args: &OracleArgs) -> Result<()> {
    let ((image, meta), (text, _)) = load_pair(&args.posterior)?;
    let classes = class_gaussians(&text, &args.class_text)?;
    let features = load_features(&args.features)?;
    check_width(&args.features, &features, image.d_in())?;
    let rows = args.rows.unwrap_or(features.nrows()).min(features.nrows());
    let features = features.rows(0, rows).into_owned();
    let embeddings = image.embed_all(&features)?;
    match args.mode.as_str() {
        "cosine" => {
            let mut table = Table::new(["row", "class", "analytic_mean", "analytic_var", "mc_mean", "mc_var", "mc_se"]);
            for (i, g) in embeddings.iter().enumerate() {
                for (c, h) in classes.iter().enumerate() {
                    let a = probcosine_moments(g, h)?;
                    let seed = substream(args.seed, &format!("oracle.cosine.{i}.{c}"));
                    let mc = mc_cosine_oracle(g, h, args.n_samples, seed)?;
                    table.push(vec![
                        i.to_string(),
                        c.to_string(),
                        fmt_num(a.mean),
                        fmt_num(a.var),
                        fmt_num(mc.mean),
                        fmt_num(mc.var),
                        fmt_num(mc.se_mean),
                    ]);
                }
            }
            table.write(&args.out)
        }
        "predictive" => {
            let c = classes.len();
            let header = ["row".to_string(), "tv".to_string()]
                .into_iter()
                .chain((0..c).map(|k| format!("analytic_p{k}")))
                .chain((0..c).map(|k| format!("mc_p{k}")));
            let mut table = Table::new(header);
            for (i, g) in embeddings.iter().enumerate() {
                let analytic = probit_for_embedding(g, &classes, meta.temperature)?;
                let seed = substream(args.seed, &format!("oracle.predictive.{i}"));
                let feature = features.row(i).transpose();
                let mc = mc_predictive_oracle(&image, &feature, &classes, args.n_samples, seed, meta.temperature)?;
                let mut row = vec![i.to_string(), fmt_num(total_variation(analytic.probs(), mc.probs()))];
                row.extend(analytic.probs().iter().map(|v| fmt_num(*v)));
                row.extend(mc.probs().iter().map(|v| fmt_num(*v)));
                table.push(row);
            }
            table.write(&args.out)
        }
        other => Err(Error::Arg(format!("unknown oracle mode {other:?} (expected cosine or predictive)"))),
    }
}

fn write_split(out: &Path, prefix: &str, features: &DMatrix<f64>, labels: &[usize]) -> Result<()> {
    let feat = format!("{prefix}features.bvm");
    let lab = format!("{prefix}labels.txt");
    save_matrix(&EmbeddingMatrix::from_dmatrix(features)?, out.join(&feat))?;
    save_labels(labels, out.join(&lab))?;
    let manifest_name = if prefix.is_empty() { "manifest.json".to_string() } else { format!("{prefix}manifest.json") };
    DatasetManifest {
        features_path: PathBuf::from(feat),
        labels_path: Some(PathBuf::from(lab)),
        class_names: None,
        seed: None,
    }
    .save(out.join(manifest_name))
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    if args.holdout >= args.n {
        return Err(Error::Arg(format!("--holdout {} must be below --n {}", args.holdout, args.n)));
    }
    let p = generate_synthetic(args.d_in, args.d_out, args.n, args.classes, args.seed)?;
    std::fs::create_dir_all(&args.out).map_err(|e| crate::table::io_error(&args.out, e))?;
    let n_train = args.n - args.holdout;
    let img = p.features.to_dmatrix();
    let txt = p.text_features.to_dmatrix();
    write_split(&args.out, "", &img.rows(0, n_train).into_owned(), &p.labels[..n_train])?;
    save_matrix(&EmbeddingMatrix::from_dmatrix(&txt.rows(0, n_train).into_owned())?, args.out.join("text_features.bvm"))?;
    if args.holdout > 0 {
        write_split(&args.out, "val_", &img.rows(n_train, args.holdout).into_owned(), &p.labels[n_train..])?;
    }
    save_matrix(&p.class_text_features, args.out.join("class_text.bvm"))?;
    p.bundle.save(args.out.join("bundle.json"))?;
    log::info!("wrote synthetic problem to {}", args.out.display());
    Ok(())
}
