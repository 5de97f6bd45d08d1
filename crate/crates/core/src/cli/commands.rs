use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use super::args::*;
use crate::bundle::{import_csv, load_bundle, load_head, save_bundle, EmbeddingBundle};
use crate::error::{Error, Result};
use crate::eval::{
    class_deltas, concept_coverage, evaluate, manipulation_ablation, prototype_orthogonality,
    sweep, sweep_heatmap_svg, top_changes, topn_ablation, topn_curve_svg, ClassDelta,
};
use crate::retrieval::{weighted_rag, ContrastiveConfig, ContrastiveSteerer, RetrievalCache};
use crate::sae::{load_model, save_model};
use crate::steering::{
    build_prototypes, sae_steer, steering_vector_prototype, PrototypeTable, SteeringConfig,
};
use crate::train::{train_run, TrainConfig};

fn check_inputs(paths: &[&Path]) -> Result<()> {
    for p in paths {
        if !p.is_file() {
            return Err(Error::io(
                p,
                std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found"),
            ));
        }
    }
    Ok(())
}

fn check_outputs(paths: &[&Path]) -> Result<()> {
    for p in paths {
        let parent = p.parent().filter(|d| !d.as_os_str().is_empty());
        if let Some(dir) = parent {
            if !dir.is_dir() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "output directory missing"),
                ));
            }
        }
    }
    Ok(())
}

fn echo<T: Serialize>(args: &T) -> serde_json::Value {
    serde_json::to_value(args).unwrap_or(serde_json::Value::Null)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

#[derive(Serialize)]
struct Output<'a, T: Serialize> {
    config: serde_json::Value,
    #[serde(flatten)]
    result: &'a T,
}

pub(crate) fn ingest(a: &IngestArgs) -> Result<()> {
    check_inputs(&[&a.csv])?;
    check_outputs(&[&a.out])?;
    let bundle = import_csv(&a.csv, a.labels)?;
    save_bundle(&bundle, &a.out)?;
    eprintln!("ingested {} rows of dim {}", bundle.rows(), bundle.dim());
    Ok(())
}

pub(crate) fn train_sae(a: &TrainArgs) -> Result<()> {
    check_inputs(&[&a.embeddings])?;
    let mut outs = vec![a.out.as_path()];
    outs.extend(a.log.as_deref());
    check_outputs(&outs)?;
    let config = TrainConfig {
        mode: a.mode,
        k: a.k,
        expansion_factor: a.expansion,
        alpha_l1: a.alpha,
        w_aux: a.w_aux,
        lr_peak: a.lr,
        warmup_fraction: a.warmup,
        epochs: a.epochs,
        batch_size: a.batch_size,
        dead_threshold: a.dead_threshold,
        seed: a.seed,
        selection: a.selection,
        log_every: a.log_every,
        ..TrainConfig::default()
    };
    config.validate()?;
    let data = load_bundle(&a.embeddings)?;
    let run = train_run(&config, &data)?;
    save_model(&run.model, &run.checkpoint_info(&config), &a.out)?;
    if let Some(log) = &a.log {
        run.log.save(log)?;
    }
    if let Some(step) = run.aborted_at {
        return Err(Error::Numerics { step });
    }
    if let Some(last) = run.log.last() {
        eprintln!(
            "trained {} steps: loss {:.6}, fvu {:.4}, {} live latents",
            run.steps, last.loss, last.fvu, last.live_latents
        );
    }
    Ok(())
}

pub(crate) fn steer(a: &SteerArgs) -> Result<()> {
    check_inputs(&[&a.embeddings, &a.model])?;
    check_outputs(&[&a.out])?;
    let config = SteeringConfig {
        gamma: a.knobs.gamma,
        lambda: a.knobs.lambda,
        mode: a.steer_mode,
        k: a.k,
    };
    config.validate()?;
    let bundle = load_bundle(&a.embeddings)?;
    let (model, _) = load_model(&a.model)?;
    let rows = (0..bundle.rows())
        .into_par_iter()
        .map(|i| sae_steer(&model, &bundle.row_f64(i), &config))
        .collect::<Result<Vec<_>>>()?;
    let mut out = bundle.with_rows(&rows)?;
    out.meta_mut().insert(
        "steering".into(),
        serde_json::to_string(&config).map_err(|e| Error::Format(e.to_string()))?,
    );
    save_bundle(&out, &a.out)
}

#[derive(Serialize)]
struct DeltaTable {
    top1_delta: f64,
    gains: Vec<ClassDelta>,
    losses: Vec<ClassDelta>,
}

pub(crate) fn eval(a: &EvalArgs) -> Result<()> {
    let mut ins = vec![a.test.as_path(), a.head.as_path()];
    ins.extend(a.model.as_deref());
    check_inputs(&ins)?;
    let mut outs = vec![a.out.as_path()];
    outs.extend(a.deltas.as_deref());
    check_outputs(&outs)?;
    let test = load_bundle(&a.test)?;
    let head = load_head(&a.head)?;
    let model = a
        .model
        .as_ref()
        .map(load_model)
        .transpose()?
        .map(|(m, _)| m);
    let config = SteeringConfig {
        gamma: a.knobs.gamma,
        lambda: a.knobs.lambda,
        mode: a.steer_mode,
        k: a.k,
    };
    config.validate()?;
    let report = match &model {
        Some(m) => {
            let f = |_: usize, x: &[f64]| sae_steer(m, x, &config);
            evaluate(&test, &head, Some(&f), echo(a))?
        }
        None => evaluate(&test, &head, None, echo(a))?,
    };
    write_text(&a.out, &(report.to_json() + "\n"))?;
    eprintln!(
        "top1 {:.4} top5 {:.4} ({} rows, {:.2?})",
        report.top1,
        report.top5,
        test.rows(),
        report.runtime
    );
    if let Some(path) = &a.deltas {
        let baseline = evaluate(&test, &head, None, serde_json::Value::Null)?;
        let deltas = class_deltas(&baseline, &report)?;
        let (gains, losses) = top_changes(&deltas, 10);
        write_json(
            path,
            &DeltaTable {
                top1_delta: report.top1 - baseline.top1,
                gains,
                losses,
            },
        )?;
    }
    Ok(())
}

struct LoadedCache {
    cache: RetrievalCache,
    test_retrieval: Option<EmbeddingBundle>,
}

fn load_cache(c: &CacheArgs, test_rows: usize) -> Result<LoadedCache> {
    let mut ins: Vec<&Path> = Vec::new();
    ins.extend(c.cache.as_deref());
    ins.extend(c.corpus.as_deref());
    ins.extend(c.corpus_retrieval.as_deref());
    ins.extend(c.test_retrieval.as_deref());
    check_inputs(&ins)?;
    if let Some(p) = &c.write_manifest {
        check_outputs(&[p])?;
    }
    let cache = match (&c.cache, &c.corpus) {
        (Some(manifest), _) => RetrievalCache::load_manifest(manifest)?,
        (None, Some(corpus)) => {
            let steering = load_bundle(corpus)?;
            let cache = match &c.corpus_retrieval {
                Some(r) => RetrievalCache::dual_space(steering, &load_bundle(r)?)?,
                None => RetrievalCache::single_space(steering)?,
            };
            if let Some(out) = &c.write_manifest {
                let abs = |p: &PathBuf| fs::canonicalize(p).map_err(|e| Error::io(p, e));
                let retrieval = c.corpus_retrieval.as_ref().map(abs).transpose()?;
                cache.save_manifest(out, &abs(corpus)?, retrieval.as_deref())?;
            }
            cache
        }
        (None, None) => {
            return Err(Error::Config("retrieval needs --cache or --corpus".into()));
        }
    };
    let test_retrieval = c.test_retrieval.as_ref().map(load_bundle).transpose()?;
    match &test_retrieval {
        Some(r) if r.rows() != test_rows => return Err(Error::shape(test_rows, r.rows())),
        None if cache.is_dual() => {
            return Err(Error::Config(
                "a dual-space cache needs --test-retrieval queries".into(),
            ))
        }
        _ => {}
    }
    Ok(LoadedCache {
        cache,
        test_retrieval,
    })
}

pub(crate) fn vs2pp(a: &Vs2ppArgs) -> Result<()> {
    check_inputs(&[&a.test, &a.head, &a.model])?;
    check_outputs(&[&a.out])?;
    let test = load_bundle(&a.test)?;
    let head = load_head(&a.head)?;
    let (model, _) = load_model(&a.model)?;
    let LoadedCache {
        cache,
        test_retrieval,
    } = load_cache(&a.cache, test.rows())?;
    let labels = test.labels();
    let rq = |i: usize| test_retrieval.as_ref().map(|r| r.row_f64(i));
    let report = match a.method {
        Vs2ppMethod::Contrastive => {
            let config = ContrastiveConfig {
                neighbors: a.neighbors,
                policy: a.policy,
                gamma: a.knobs.gamma,
                lambda: a.knobs.lambda,
            };
            let steerer = ContrastiveSteerer::new(&model, &cache, &head, config)?;
            let f = |i: usize, x: &[f64]| {
                steerer.steer(
                    x,
                    rq(i).as_deref(),
                    Some(&test.ids()[i]),
                    labels.map(|l| l[i]),
                )
            };
            evaluate(&test, &head, Some(&f), echo(a))?
        }
        Vs2ppMethod::Rag => {
            let f = |i: usize, x: &[f64]| {
                let q = rq(i);
                let nb = cache.neighbors(
                    q.as_deref().unwrap_or(x),
                    Some(&test.ids()[i]),
                    a.neighbors,
                )?;
                weighted_rag(x, &nb, cache.steering(), a.rag_alpha)
            };
            evaluate(&test, &head, Some(&f), echo(a))?
        }
    };
    eprintln!("top1 {:.4} top5 {:.4}", report.top1, report.top5);
    write_text(&a.out, &(report.to_json() + "\n"))
}

pub(crate) fn sweep_cmd(a: &SweepArgs) -> Result<()> {
    check_inputs(&[&a.test, &a.head, &a.model])?;
    let mut outs = vec![a.out.as_path()];
    outs.extend(a.svg.as_deref());
    check_outputs(&outs)?;
    let test = load_bundle(&a.test)?;
    let head = load_head(&a.head)?;
    let (model, _) = load_model(&a.model)?;
    let grid = sweep(&test, &head, &model, &a.gammas, &a.lambdas)?;
    if let Some((g, l, acc)) = grid.best() {
        eprintln!(
            "best gamma {g} lambda {l}: top1 {acc:.4} (baseline {:.4})",
            grid.baseline
        );
    }
    write_json(
        &a.out,
        &Output {
            config: echo(a),
            result: &grid,
        },
    )?;
    if let Some(svg) = &a.svg {
        write_text(svg, &sweep_heatmap_svg(&grid))?;
    }
    Ok(())
}

pub(crate) fn ablate(a: &AblateArgs) -> Result<()> {
    check_inputs(&[&a.test, &a.head, &a.model])?;
    check_outputs(&[&a.out])?;
    let test = load_bundle(&a.test)?;
    let head = load_head(&a.head)?;
    let (model, _) = load_model(&a.model)?;
    let report = manipulation_ablation(&test, &head, &model, a.knobs.gamma, a.knobs.lambda)?;
    if !report.ordering_holds {
        eprintln!("warning: expected negate <= zero_out < baseline");
    }
    write_json(
        &a.out,
        &Output {
            config: echo(a),
            result: &report,
        },
    )
}

pub(crate) fn prototypes(a: &PrototypesArgs) -> Result<()> {
    check_inputs(&[&a.embeddings, &a.head, &a.model])?;
    check_outputs(&[&a.out])?;
    let bundle = load_bundle(&a.embeddings)?;
    let head = load_head(&a.head)?;
    let (model, _) = load_model(&a.model)?;
    let table = build_prototypes(&model, &bundle, &head, a.m, a.true_labels)?;
    save_bundle(&table.to_bundle()?, &a.out)
}

pub(crate) fn orthogonality(a: &OrthogonalityArgs) -> Result<()> {
    check_inputs(&[&a.model, &a.prototypes])?;
    check_outputs(&[&a.out])?;
    let (model, _) = load_model(&a.model)?;
    let table = PrototypeTable::from_bundle(&load_bundle(&a.prototypes)?)?;
    if table.latent_dim != model.latent_dim() {
        return Err(Error::shape(model.latent_dim(), table.latent_dim));
    }
    let vectors = (0..table.num_classes())
        .map(|c| {
            steering_vector_prototype(&model, c, &table, a.gamma)
                .map(|v| (table.class_names[c].clone(), v))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = prototype_orthogonality(&vectors, a.top)?;
    eprintln!("mean off-diagonal cosine {:.4}", report.mean_off_diagonal);
    write_json(
        &a.out,
        &Output {
            config: echo(a),
            result: &report,
        },
    )
}

pub(crate) fn coverage(a: &CoverageArgs) -> Result<()> {
    check_inputs(&[&a.model, &a.embeddings])?;
    check_outputs(&[&a.out])?;
    let (model, _) = load_model(&a.model)?;
    let bundle = load_bundle(&a.embeddings)?;
    let report = concept_coverage(&model, &bundle, a.feature, a.m)?;
    write_json(
        &a.out,
        &Output {
            config: echo(a),
            result: &report,
        },
    )
}

pub(crate) fn topn(a: &TopnArgs) -> Result<()> {
    check_inputs(&[&a.test, &a.head, &a.model])?;
    let mut outs = vec![a.out.as_path()];
    outs.extend(a.svg.as_deref());
    check_outputs(&outs)?;
    if a.n_values.is_empty() {
        return Err(Error::Config(
            "--n-values must list at least one count".into(),
        ));
    }
    let test = load_bundle(&a.test)?;
    let head = load_head(&a.head)?;
    let (model, _) = load_model(&a.model)?;
    let LoadedCache {
        cache,
        test_retrieval,
    } = load_cache(&a.cache, test.rows())?;
    let base = ContrastiveConfig {
        neighbors: a.n_values[0],
        policy: a.policy,
        gamma: a.knobs.gamma,
        lambda: a.knobs.lambda,
    };
    let curve = topn_ablation(
        &test,
        test_retrieval.as_ref(),
        &head,
        &model,
        &cache,
        base,
        &a.n_values,
    )?;
    write_json(
        &a.out,
        &Output {
            config: echo(a),
            result: &curve,
        },
    )?;
    if let Some(svg) = &a.svg {
        write_text(svg, &topn_curve_svg(&curve))?;
    }
    Ok(())
}
