//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use smae::autodiff::gradcheck::FD_REL_TOL;
use smae::autodiff::{ParamStore, Tensor};
use smae::backbone::Encoder;
use smae::geometry::{make_shape, PatchSet, ShapeKind};
use smae::heads::Classifier;
use smae::masking::{csem_mask, Strategy};
use smae::model::SemanticMae;
use smae::nn::{zero_linear, Graph};
use smae::oracle::{csem_suite, geometry_suite};
use smae::pcsm::contrastive_loss;
use smae::pipeline::ablate::ablate;
use smae::pipeline::checkpoint::Checkpoint;
use smae::pipeline::data::held_out;
use smae::pipeline::export::export_groups;
use smae::pipeline::finetune::finetune;
use smae::pipeline::gradsuite::gradient_suite;
use smae::pipeline::metrics::nmi;
use smae::pipeline::pretrain::{pretrain, PretrainRun};
use smae::RunConfig;

const GRAD_BUDGET_SECS: f64 = 60.0;
const CHAMFER_TOL: f64 = 1e-12;
const CLOSED_FORM_TOL: f64 = 1e-9;
const LOSS_RATIO: f64 = 0.5;
const PRETRAIN_BUDGET_SECS: f64 = 600.0;
const HELD_OUT_PLANES: usize = 16;
const RANDOM_BASELINES: usize = 100;
const TARGET_TRAIN_ACC: f64 = 0.8;
const FINETUNE_EPOCH_LIMIT: usize = 50;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: smae::Error) -> String {
    e.to_string()
}

fn gradients() -> Outcome {
    let cfg = RunConfig::toy();
    let t = Instant::now();
    let cases = gradient_suite(&cfg).map_err(err)?;
    let secs = t.elapsed().as_secs_f64();
    let worst = cases
        .iter()
        .map(|c| c.report.max_rel_err)
        .fold(0.0, f64::max);
    let names: Vec<&str> = cases.iter().map(|c| c.loss).collect();
    check(
        worst <= FD_REL_TOL && secs < GRAD_BUDGET_SECS,
        format!(
            "losses {names:?} (G={}, C={}, Q={}): max rel err {worst:.2e} <= {FD_REL_TOL:e}, {secs:.1}s < {GRAD_BUDGET_SECS}s",
            cfg.groups, cfg.dim, cfg.prototypes
        ),
    )
}

fn geometry() -> Outcome {
    let r = geometry_suite(200, 7).map_err(err)?;
    check(
        r.passes(CHAMFER_TOL),
        format!(
            "{} instances: fps mismatches {}, knn mismatches {}, chamfer max err {:.1e}",
            r.instances, r.fps_mismatches, r.knn_mismatches, r.chamfer_max_abs_err
        ),
    )
}

fn masking() -> Outcome {
    let r = csem_suite(1000, 11).map_err(err)?;
    let four: Vec<usize> = (0..64).map(|i| i / 16).collect();
    let plan = csem_mask(&four, 1, 0.6, &mut ChaCha8Rng::seed_from_u64(3)).map_err(err)?;
    let full = plan.fully_masked_components[0];
    let mut rest: Vec<usize> = plan
        .per_component_counts
        .iter()
        .filter(|(c, _)| **c != full)
        .map(|(_, &(_, m))| m)
        .collect();
    rest.sort_unstable_by(|a, b| b.cmp(a));
    let single = csem_mask(&[5; 20], 1, 0.5, &mut ChaCha8Rng::seed_from_u64(0)).map_err(err)?;
    check(
        r.violations.is_empty()
            && plan.masked_count() == 38
            && rest == [8, 7, 7]
            && single.masked_count() == 10,
        format!(
            "{} random instances, {} violations; 4x16 example masks 38 with remainder {rest:?}; single-component fallback masks {}",
            r.instances,
            r.violations.len(),
            single.masked_count()
        ),
    )
}

fn closed_forms() -> Outcome {
    let eval = |p: Tensor, eps: f64| {
        let store = ParamStore::new(0);
        let mut g = Graph::new(&store);
        let v = g.constant(p);
        let l = contrastive_loss(&mut g, v, eps).map_err(err)?;
        Ok::<f64, String>(g.value(l).item())
    };
    let same = eval(
        Tensor::matrix(2, 3, vec![0.3, -1.0, 2.0, 0.3, -1.0, 2.0]).unwrap(),
        0.07,
    )?;
    let orth = eval(
        Tensor::matrix(2, 3, vec![2.0, 0.0, 0.0, 0.0, 0.0, 0.7]).unwrap(),
        1.0,
    )?;
    let want_same = 2.0 * std::f64::consts::LN_2;
    let want_orth = 2.0 * (1.0 + (-1.0f64).exp()).ln();
    check(
        (same - want_same).abs() <= CLOSED_FORM_TOL && (orth - want_orth).abs() <= CLOSED_FORM_TOL,
        format!(
            "identical Q=2: {same:.12} vs 2ln2; orthogonal eps=1: {orth:.12} vs {want_orth:.12}"
        ),
    )
}

fn convergence(run: &PretrainRun, again: &PretrainRun, same_files: bool) -> Outcome {
    let first = run.epochs.first().ok_or("no epochs")?.loss_total;
    let last = run.epochs.last().ok_or("no epochs")?.loss_total;
    let identical = run.epochs == again.epochs && same_files;
    check(
        last <= LOSS_RATIO * first && run.seconds < PRETRAIN_BUDGET_SECS && identical,
        format!(
            "epoch 1 {first:.4} -> epoch {} {last:.4} (ratio {:.3} <= {LOSS_RATIO}), {:.1}s < {PRETRAIN_BUDGET_SECS}s, rerun bit-identical: {identical}",
            run.epochs.len(),
            last / first,
            run.seconds
        ),
    )
}

fn grouping(cfg: &RunConfig, run: &PretrainRun) -> Outcome {
    let clouds = held_out(cfg, ShapeKind::Plane, HELD_OUT_PLANES).map_err(err)?;
    let mut model = 0.0;
    for c in &clouds {
        let groups = export_groups(cfg, &run.store, c).map_err(err)?;
        model += nmi(&groups.labels, c.labels.as_ref().ok_or("unlabelled cloud")?);
    }
    model /= clouds.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut random = 0.0;
    for _ in 0..RANDOM_BASELINES {
        for c in &clouds {
            let labels: Vec<usize> = (0..c.len())
                .map(|_| rng.gen_range(0..cfg.prototypes))
                .collect();
            random += nmi(&labels, c.labels.as_ref().ok_or("unlabelled cloud")?);
        }
    }
    random /= (RANDOM_BASELINES * clouds.len()) as f64;
    check(
        model > random,
        format!(
            "NMI on {HELD_OUT_PLANES} held-out planes {model:.4} > random {}-way mean {random:.4}",
            cfg.prototypes
        ),
    )
}

/// Zero-prompt equality, checked where attention cannot mix rows.
fn zero_prompt_prefix(cfg: &RunConfig) -> Result<bool, String> {
    let enc = Encoder::from_config(cfg);
    let base = Classifier::from_config(cfg, 4, false);
    let prompted = Classifier::from_config(cfg, 4, true);
    let mut store = ParamStore::new(cfg.seed);
    enc.register(&mut store).map_err(err)?;
    base.register(&mut store).map_err(err)?;
    for b in &enc.blocks {
        zero_linear(&mut store, &b.attn.out).map_err(err)?;
    }
    let cloud = make_shape(ShapeKind::Table, cfg.n_points, 1).map_err(err)?;
    let patches = PatchSet::build(&cloud, cfg.groups, cfg.group_size, 0).map_err(err)?;
    let model = SemanticMae::from_config(cfg);
    let mut full = store.clone();
    model.embed.register(&mut full).map_err(err)?;
    let mut g = Graph::new(&full);
    let (t, p) = model.embed.embed(&mut g, &patches).map_err(err)?;
    let fb = base.features(&mut g, &enc, t, p, None).map_err(err)?;
    let zero = g.constant(Tensor::zeros(&[cfg.prototypes, cfg.dim]));
    let fp = prompted
        .features(&mut g, &enc, t, p, Some(zero))
        .map_err(err)?;
    let (b, q) = (g.value(fb).data(), g.value(fp).data());
    let c = cfg.dim;
    Ok(b[..c] == q[..c] && b[c..] == q[2 * c..])
}

fn heads(cfg: &RunConfig, run: &PretrainRun) -> Outcome {
    let ft_cfg = RunConfig {
        finetune_epochs: FINETUNE_EPOCH_LIMIT,
        finetune_target_acc: TARGET_TRAIN_ACC,
        ..cfg.clone()
    };
    let base = finetune(&ft_cfg, &run.store, false, None).map_err(err)?;
    let prompted = finetune(&ft_cfg, &run.store, true, None).map_err(err)?;
    let acc = |r: &smae::pipeline::finetune::FinetuneRun| {
        r.epochs.iter().map(|e| e.train_acc).fold(0.0, f64::max)
    };
    let widths = base.feature_width == 2 * cfg.dim && prompted.feature_width == 3 * cfg.dim;
    let seq = prompted.sequence_len == 1 + cfg.prototypes + cfg.groups;
    let zero = zero_prompt_prefix(cfg)?;
    check(
        widths && seq && zero && acc(&base) >= TARGET_TRAIN_ACC && acc(&prompted) >= TARGET_TRAIN_ACC,
        format!(
            "widths {}/{} (2C/3C), prompted sequence {}, zero-prompt prefix equal {zero}; train acc baseline {:.3} after {} epochs, prompted {:.3} after {} epochs (>= {TARGET_TRAIN_ACC} within {FINETUNE_EPOCH_LIMIT})",
            base.feature_width,
            prompted.feature_width,
            prompted.sequence_len,
            acc(&base),
            base.epochs.len(),
            acc(&prompted),
            prompted.epochs.len()
        ),
    )
}

fn ablation() -> Outcome {
    let cfg = RunConfig {
        epochs: 4,
        finetune_epochs: 2,
        ..RunConfig::test_small()
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let rows = ablate(&cfg, &Strategy::ALL, Some(dir.path())).map_err(err)?;
    let same_start = rows
        .windows(2)
        .all(|w| w[0].init_hash == w[1].init_hash && w[0].data_hash == w[1].data_hash);
    let csem = rows
        .iter()
        .find(|r| r.strategy == "csem")
        .ok_or("no csem row")?;
    let randm = rows
        .iter()
        .find(|r| r.strategy == "randm")
        .ok_or("no randm row")?;
    let csv_rows = std::fs::read_to_string(dir.path().join("ablation.csv"))
        .map_err(|e| e.to_string())?
        .lines()
        .count();
    check(
        same_start && csem.coverage_min == 1.0 && randm.coverage_mean < 1.0 && csv_rows == 4,
        format!(
            "{} strategies share init/data hashes: {same_start}; csem min per-step coverage {:.3}; randm mean coverage {:.3}",
            rows.len(),
            csem.coverage_min,
            randm.coverage_mean
        ),
    )
}

fn checkpoints(run: &PretrainRun) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("a.bin");
    let ck = run.checkpoint();
    ck.save(&path).map_err(err)?;
    let first = std::fs::read(&path).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(&path).map_err(err)?;
    let path2 = dir.path().join("b.bin");
    loaded.save(&path2).map_err(err)?;
    let second = std::fs::read(&path2).map_err(|e| e.to_string())?;
    let mut wide = run.config.clone();
    wide.dim *= 2;
    let mut target = SemanticMae::init_store(&wide).map_err(err)?;
    let message = match ck.load_into(&mut target) {
        Ok(()) => String::from("<loaded without error>"),
        Err(e) => e.to_string(),
    };
    let names_tensor = message.contains("tensor '");
    check(
        first == second && names_tensor,
        format!(
            "save/load/save byte-identical ({} bytes): {}; mismatched C -> {message}",
            first.len(),
            first == second
        ),
    )
}

fn report(results: &mut Vec<bool>, n: usize, name: &str, outcome: Outcome) {
    let (ok, detail) = match outcome {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    println!(
        "criterion {n} [{name}]: {} - {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    results.push(ok);
}

fn main() {
    let mut results = Vec::new();
    report(&mut results, 1, "gradients", gradients());
    report(&mut results, 2, "geometry oracles", geometry());
    report(&mut results, 3, "component masking", masking());
    report(&mut results, 4, "contrastive closed forms", closed_forms());

    let cfg = RunConfig::test_small();
    let dirs = (tempfile::tempdir(), tempfile::tempdir());
    let runs = match dirs {
        (Ok(a), Ok(b)) => pretrain(&cfg, Some(a.path()))
            .and_then(|r1| pretrain(&cfg, Some(b.path())).map(|r2| (r1, r2)))
            .map(|(r1, r2)| {
                let same = ["metrics.jsonl", "masks.jsonl"].iter().all(|f| {
                    std::fs::read(a.path().join(f)).ok() == std::fs::read(b.path().join(f)).ok()
                });
                (r1, r2, same)
            })
            .map_err(err),
        _ => Err("cannot create temporary directories".to_string()),
    };
    match runs {
        Ok((run, again, same)) => {
            report(
                &mut results,
                5,
                "pretraining",
                convergence(&run, &again, same),
            );
            report(&mut results, 6, "grouping", grouping(&cfg, &run));
            report(&mut results, 7, "classification heads", heads(&cfg, &run));
            report(&mut results, 8, "masking ablation", ablation());
            report(&mut results, 9, "checkpoints", checkpoints(&run));
        }
        Err(e) => {
            for (n, name) in [
                (5, "pretraining"),
                (6, "grouping"),
                (7, "classification heads"),
            ] {
                report(&mut results, n, name, Err(e.clone()));
            }
            report(&mut results, 8, "masking ablation", ablation());
            report(&mut results, 9, "checkpoints", Err(e));
        }
    }
    let passed = results.iter().filter(|&&r| r).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
