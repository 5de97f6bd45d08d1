//! Acceptance criteria A1-A8. Each test writes one `A<n> PASS|FAIL` line to
//! stderr (bypassing libtest capture) before asserting.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sparse_steer::bundle::{ClassifierHead, EmbeddingBundle};
use sparse_steer::eval::{evaluate, manipulation_ablation};
use sparse_steer::retrieval::{
    knn, pseudo_label, ContrastiveConfig, ContrastiveGroups, ContrastiveSteerer, GroupPolicy,
    RetrievalCache,
};
use sparse_steer::sae::{checkpoint_bytes, model_from_bytes, CheckpointInfo, SaeModel};
use sparse_steer::steering::{
    apply_steering, sae_steer, steering_vector_vs2, Manipulation, SteerMode, SteeringConfig,
};
use sparse_steer::synthetic::{
    class_task, dictionary_data, ClassTask, ClassTaskSpec, DictionarySpec,
};
use sparse_steer::train::{
    compute_loss, train_run, ClassMeanState, LossMode, LossParams, TrainConfig,
};
use sparse_steer::{Error, Selection};

fn report(id: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{id} {verdict}: {detail}");
}

// ---------- independent oracles ----------

fn o_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn o_norm(a: &[f64]) -> f64 {
    o_dot(a, a).sqrt()
}

fn o_cos(a: &[f64], b: &[f64]) -> f64 {
    o_dot(a, b) / (o_norm(a) * o_norm(b))
}

/// Argmax of cosine against the head's raw prototypes, lowest id on ties.
fn o_predict(x: &[f64], head: &ClassifierHead) -> usize {
    let mut best = 0;
    let mut best_s = f64::NEG_INFINITY;
    for c in 0..head.num_classes() {
        let s = o_cos(x, head.prototype(c));
        if s > best_s {
            best = c;
            best_s = s;
        }
    }
    best
}

fn o_accuracy<F>(test: &EmbeddingBundle, head: &ClassifierHead, f: F) -> f64
where
    F: Fn(usize, &[f64]) -> Vec<f64>,
{
    let labels = test.labels().unwrap();
    let hits = (0..test.rows())
        .filter(|&i| o_predict(&f(i, &test.row_f64(i)), head) == labels[i] as usize)
        .count();
    hits as f64 / test.rows() as f64
}

/// ||X - X_hat||^2 / ||X - mean(X)||^2 over a bundle.
fn o_fvu(model: &SaeModel, data: &EmbeddingBundle) -> f64 {
    let rows: Vec<Vec<f64>> = (0..data.rows()).map(|i| data.row_f64(i)).collect();
    let d = data.dim();
    let mut mean = vec![0.0; d];
    for r in &rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / rows.len() as f64;
        }
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for r in &rows {
        let (xh, _) = model.reconstruct(r).unwrap();
        num += r
            .iter()
            .zip(&xh)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        den += r
            .iter()
            .zip(&mean)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    num / den
}

/// Mean Euclidean distance from each dense code to its class-mean code.
fn o_intra_class_distance(model: &SaeModel, data: &EmbeddingBundle) -> f64 {
    let n = model.latent_dim();
    let labels = data.labels().unwrap();
    let codes: Vec<Vec<f64>> = (0..data.rows())
        .map(|i| {
            let mut z = vec![0.0; n];
            for &(j, v) in model.encode(&data.row_f64(i)).unwrap().entries() {
                z[j] = v;
            }
            z
        })
        .collect();
    let mut total = 0.0;
    for c in 0..data.num_classes() as u32 {
        let members: Vec<&Vec<f64>> = codes
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == c)
            .map(|(z, _)| z)
            .collect();
        let mut mean = vec![0.0; n];
        for z in &members {
            for (m, v) in mean.iter_mut().zip(z.iter()) {
                *m += v / members.len() as f64;
            }
        }
        for z in &members {
            total += z
                .iter()
                .zip(&mean)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
        }
    }
    total / data.rows() as f64
}

fn random_model(rng: &mut ChaCha8Rng, d: usize, n: usize, k: usize) -> SaeModel {
    let mut v =
        |len: usize, s: f64| -> Vec<f64> { (0..len).map(|_| rng.random_range(-s..s)).collect() };
    let enc = v(n * d, 1.0);
    let dec = v(d * n, 1.0);
    let pre = v(d, 0.5);
    let eb = v(n, 0.3);
    SaeModel::from_parts(d, n, k, enc, dec, pre, eb, vec![false; n]).unwrap()
}

fn single_thread<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(f)
}

// ---------- A1 ----------

/// Rebuilds the model with one scalar parameter shifted. Parts: 0 = W_enc
/// (n x d), 1 = W_dec (d x n), 2 = b_pre, 3 = b_enc.
fn shifted(model: &SaeModel, part: usize, idx: usize, delta: f64) -> SaeModel {
    let (d, n) = (model.dim(), model.latent_dim());
    let mut enc = model.encoder_matrix().to_vec();
    let mut dec = model.decoder_matrix();
    let mut pre = model.pre_bias().to_vec();
    let mut eb = model.enc_bias().to_vec();
    match part {
        0 => enc[idx] += delta,
        1 => dec[idx] += delta,
        2 => pre[idx] += delta,
        _ => eb[idx] += delta,
    }
    SaeModel::from_parts(
        d,
        n,
        model.k(),
        enc,
        dec,
        pre,
        eb,
        model.dead_mask().to_vec(),
    )
    .unwrap()
}

#[test]
fn a1_gradient_correctness() {
    let start = Instant::now();
    let eps = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (d, n, k) = (3, 6, 2);
    let model = random_model(&mut rng, d, n, k);
    let batch: Vec<Vec<f64>> = (0..8)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let labels: Vec<u32> = (0..8).map(|i| (i % 3) as u32).collect();
    let mut means = ClassMeanState::new(3, n, 0.99);
    let warm: Vec<_> = batch.iter().map(|x| model.encode(x).unwrap()).collect();
    means.update(&warm, &labels).unwrap();
    let params = LossParams {
        alpha_l1: 0.05,
        w_aux: 0.8,
    };

    let mut worst_all = 0.0f64;
    let mut details = Vec::new();
    for mode in [LossMode::Topk, LossMode::L1, LossMode::Pass] {
        let (lab, cm) = match mode {
            LossMode::Pass => (Some(labels.as_slice()), Some(&means)),
            _ => (None, None),
        };
        let (_, grads) = compute_loss(&model, &batch, lab, mode, params, cm).unwrap();
        let loss_at = |m: &SaeModel| compute_loss(m, &batch, lab, mode, params, cm).unwrap().0;
        let mut worst = 0.0f64;
        let sizes = [n * d, d * n, d, n];
        for (part, &size) in sizes.iter().enumerate() {
            for idx in 0..size {
                let numeric = (loss_at(&shifted(&model, part, idx, eps))
                    - loss_at(&shifted(&model, part, idx, -eps)))
                    / (2.0 * eps);
                let analytic = match part {
                    0 => grads.enc[idx],
                    // analytic decoder gradient is latent-major
                    1 => grads.dec[(idx % n) * d + idx / n],
                    2 => grads.pre_bias[idx],
                    _ => grads.enc_bias[idx],
                };
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        details.push(format!("{mode:?} {worst:.2e}"));
        worst_all = worst_all.max(worst);
    }
    let elapsed = start.elapsed();
    let pass = worst_all < 1e-4 && elapsed < Duration::from_secs(10);
    report(
        "A1",
        pass,
        &format!(
            "max relative error [{}] in {elapsed:.2?}",
            details.join(", ")
        ),
    );
    assert!(worst_all < 1e-4, "worst relative error {worst_all}");
    assert!(elapsed < Duration::from_secs(10));
}

// ---------- A2 ----------

#[test]
fn a2_steering_identities() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let cases = 1200;
    let mut worst_norm = 0.0f64;
    let mut worst_family = 0.0f64;
    let mut identity_ok = true;
    for _ in 0..cases {
        let d = rng.random_range(2..=12);
        let n = d * rng.random_range(1..=4);
        let k = rng.random_range(1..=n);
        let model = random_model(&mut rng, d, n, k);
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let gamma = rng.random_range(-3.0..3.0);
        let lambda = rng.random_range(-4.0..4.0);
        let steer = |g: f64, l: f64| {
            sae_steer(
                &model,
                &x,
                &SteeringConfig {
                    gamma: g,
                    lambda: l,
                    mode: SteerMode::Steering,
                    k: None,
                },
            )
        };
        identity_ok &= steer(1.0, lambda).unwrap() == x;
        identity_ok &= steer(gamma, 0.0).unwrap() == x;
        match steer(gamma, lambda) {
            Ok(out) => {
                let rel = (o_norm(&out) - o_norm(&x)).abs() / o_norm(&x);
                worst_norm = worst_norm.max(rel);
            }
            Err(Error::Cancellation) => {}
            Err(e) => panic!("unexpected error {e}"),
        }
        let g2 = rng.random_range(-3.0..3.0);
        let v1 = steering_vector_vs2(&model, &x, gamma).unwrap().direction;
        let v2 = steering_vector_vs2(&model, &x, g2).unwrap().direction;
        let lhs: Vec<f64> = v1.iter().map(|v| v * (g2 - 1.0)).collect();
        let rhs: Vec<f64> = v2.iter().map(|v| v * (gamma - 1.0)).collect();
        let scale = o_norm(&lhs).max(o_norm(&rhs)).max(1.0);
        let diff: Vec<f64> = lhs.iter().zip(&rhs).map(|(a, b)| a - b).collect();
        worst_family = worst_family.max(o_norm(&diff) / scale);
    }
    let elapsed = start.elapsed();
    let pass = identity_ok
        && worst_norm < 1e-6
        && worst_family < 1e-6
        && elapsed < Duration::from_secs(30);
    report(
        "A2",
        pass,
        &format!(
            "{cases} cases: identities exact {identity_ok}, norm err {worst_norm:.2e}, family err {worst_family:.2e}, {elapsed:.2?}"
        ),
    );
    assert!(identity_ok);
    assert!(worst_norm < 1e-6);
    assert!(worst_family < 1e-6);
    assert!(elapsed < Duration::from_secs(30));
}

// ---------- A3 ----------

#[test]
fn a3_dictionary_recovery() {
    let start = Instant::now();
    let data = dictionary_data(&DictionarySpec::default()).unwrap();
    let config = TrainConfig {
        k: 8,
        expansion_factor: 4,
        ..TrainConfig::default()
    };
    let (initial, trained) = single_thread(|| {
        let init = train_run(
            &TrainConfig {
                epochs: 0,
                ..config.clone()
            },
            &data.train,
        )
        .unwrap();
        let run = train_run(&config, &data.train).unwrap();
        (init.model, run.model)
    });
    assert_eq!(trained.latent_dim(), 256);
    let fvu0 = o_fvu(&initial, &data.test);
    let fvu = o_fvu(&trained, &data.test);
    let elapsed = start.elapsed();
    let pass = fvu < 0.10 && fvu0 - fvu >= 0.3 && elapsed < Duration::from_secs(300);
    report(
        "A3",
        pass,
        &format!("held-out FVU {fvu:.4} (step 0: {fvu0:.4}) in {elapsed:.2?}, single thread"),
    );
    assert!(fvu0 - fvu >= 0.3, "improvement {}", fvu0 - fvu);
    assert!(elapsed < Duration::from_secs(300));
    assert!(fvu < 0.10, "held-out FVU {fvu}");
}

// ---------- A4 ----------

#[test]
fn a4_retrieval_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut mismatches = 0;
    for case in 0..100 {
        let d = rng.random_range(2..=16);
        let rows = rng.random_range(5..=80);
        let mut data: Vec<Vec<f64>> = (0..rows)
            .map(|_| {
                (0..d)
                    .map(|_| f64::from(rng.random_range(-1.0f32..1.0)))
                    .collect()
            })
            .collect();
        // exact duplicates exercise the tie rule
        for _ in 0..rows / 5 {
            let a = rng.random_range(0..rows);
            let b = rng.random_range(0..rows);
            data[b] = data[a].clone();
        }
        let corpus = EmbeddingBundle::from_rows(&data, None, vec![]).unwrap();
        let self_query = case % 2 == 0;
        let qi = rng.random_range(0..rows);
        let query: Vec<f64> = if self_query {
            data[qi].clone()
        } else {
            (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
        };
        let qid = self_query.then(|| corpus.ids()[qi].clone());
        let available = rows - usize::from(self_query);
        let n = rng.random_range(1..=available);

        let mut scored: Vec<(f64, usize)> = (0..rows)
            .filter(|&i| !(self_query && i == qi))
            .map(|i| (o_cos(&query, &data[i]), i))
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let expected: Vec<usize> = scored[..n].iter().map(|p| p.1).collect();
        let got = knn(&corpus, &query, qid.as_deref(), n).unwrap();
        if got.indices != expected {
            mismatches += 1;
        }

        let classes = rng.random_range(2..=10);
        let protos: Vec<Vec<f64>> = (0..classes)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let names = (0..classes).map(|c| format!("c{c}")).collect();
        let head = ClassifierHead::new(protos.clone(), names).unwrap();
        let mut best = 0;
        for c in 1..classes {
            if o_cos(&query, &protos[c]) > o_cos(&query, &protos[best]) {
                best = c;
            }
        }
        if pseudo_label(&query, &head).unwrap() as usize != best {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = mismatches == 0 && elapsed < Duration::from_secs(10);
    report(
        "A4",
        pass,
        &format!("100 instances, {mismatches} mismatches, {elapsed:.2?}"),
    );
    assert_eq!(mismatches, 0);
    assert!(elapsed < Duration::from_secs(10));
}

// ---------- A5 / A6 / A8 shared task ----------

fn task_and_model() -> (ClassTask, SaeModel) {
    let task = class_task(&ClassTaskSpec::default()).unwrap();
    let config = TrainConfig {
        k: 4,
        batch_size: 128,
        epochs: 50,
        ..TrainConfig::default()
    };
    let run = train_run(&config, &task.train).unwrap();
    (task, run.model)
}

#[test]
fn a5_manipulation_ordering() {
    let start = Instant::now();
    let (task, model) = task_and_model();
    let (gamma, lambda) = (1.5, 2.1);
    let steer_with = |g: f64| {
        let model = &model;
        move |_: usize, x: &[f64]| {
            sae_steer(
                model,
                x,
                &SteeringConfig {
                    gamma: g,
                    lambda,
                    mode: SteerMode::Steering,
                    k: None,
                },
            )
            .unwrap()
        }
    };
    let identity = o_accuracy(&task.test, &task.head, |_, x| x.to_vec());
    let vs2 = o_accuracy(&task.test, &task.head, steer_with(gamma));
    let zero = o_accuracy(
        &task.test,
        &task.head,
        steer_with(Manipulation::ZeroOut.gamma()),
    );
    let negate = o_accuracy(
        &task.test,
        &task.head,
        steer_with(Manipulation::Negate.gamma()),
    );

    let lib = manipulation_ablation(&task.test, &task.head, &model, gamma, lambda).unwrap();
    let agrees =
        lib.baseline == identity && lib.vs2 == vs2 && lib.zero_out == zero && lib.negate == negate;
    let ordering = negate <= zero && zero < identity && identity < vs2;
    let elapsed = start.elapsed();
    let pass = ordering && agrees && lib.ordering_holds && elapsed < Duration::from_secs(120);
    report(
        "A5",
        pass,
        &format!(
            "negate {negate:.3} <= zero_out {zero:.3} < identity {identity:.3} < vs2 {vs2:.3}; library report agrees: {agrees}; {elapsed:.2?}"
        ),
    );
    assert!(ordering);
    assert!(agrees);
    assert!(elapsed < Duration::from_secs(120));
}

#[test]
fn a6_vs2pp_dominance() {
    let start = Instant::now();
    let (task, model) = task_and_model();
    let labels = task.test.labels().unwrap();
    let cache = RetrievalCache::single_space(task.train.clone()).unwrap();
    let config = ContrastiveConfig {
        neighbors: 50,
        policy: GroupPolicy::Oracle,
        gamma: 1.5,
        lambda: 2.1,
    };
    let steerer = ContrastiveSteerer::new(&model, &cache, &task.head, config).unwrap();

    let identity = o_accuracy(&task.test, &task.head, |_, x| x.to_vec());
    let vs2 = o_accuracy(&task.test, &task.head, |_, x| {
        let v = steering_vector_vs2(&model, x, 1.5).unwrap();
        apply_steering(x, &v, 2.1).unwrap()
    });
    let vs2pp = o_accuracy(&task.test, &task.head, |i, x| {
        steerer
            .steer(x, None, Some(&task.test.ids()[i]), Some(labels[i]))
            .unwrap()
    });

    // identical positive and negative groups cancel exactly
    let mut forced_identity = true;
    for (i, &label) in labels.iter().enumerate() {
        let x = task.test.row_f64(i);
        let groups = steerer
            .groups(&x, None, Some(&task.test.ids()[i]), Some(label))
            .unwrap();
        let mut all = groups.positives.clone();
        all.extend(&groups.negatives);
        let forced = ContrastiveGroups {
            positives: all.clone(),
            negatives: all,
            ..groups
        };
        let v = steerer.vector(&x, &forced).unwrap();
        forced_identity &= apply_steering(&x, &v, config.lambda).unwrap() == x;
    }
    let lib = evaluate(
        &task.test,
        &task.head,
        Some(&|i: usize, x: &[f64]| {
            steerer.steer(x, None, Some(&task.test.ids()[i]), Some(labels[i]))
        }),
        serde_json::Value::Null,
    )
    .unwrap();
    let agrees = lib.top1 == vs2pp;
    let elapsed = start.elapsed();
    let pass = vs2pp >= vs2
        && vs2 >= identity
        && forced_identity
        && agrees
        && elapsed < Duration::from_secs(120);
    report(
        "A6",
        pass,
        &format!(
            "vs2pp {vs2pp:.3} >= vs2 {vs2:.3} >= identity {identity:.3}; forced equal groups give identity: {forced_identity}; {elapsed:.2?}"
        ),
    );
    assert!(vs2pp >= vs2 && vs2 >= identity);
    assert!(forced_identity);
    assert!(agrees);
    assert!(elapsed < Duration::from_secs(120));
}

// ---------- A7 ----------

fn random_bundle(rng: &mut ChaCha8Rng) -> EmbeddingBundle {
    let rows = rng.random_range(0..12);
    let dim = rng.random_range(1..9);
    let data: Vec<f32> = (0..rows * dim)
        .map(|_| rng.random_range(-1e3f32..1e3))
        .collect();
    let ids: Vec<String> = (0..rows)
        .map(|i| format!("id-{i}-{}", rng.random_range(0..1000)))
        .collect();
    let classes = rng.random_range(1..5);
    let class_names: Vec<String> = (0..classes).map(|c| format!("class \"{c}\" é")).collect();
    let labels = rng.random_bool(0.5).then(|| {
        (0..rows)
            .map(|_| rng.random_range(0..classes as u32))
            .collect()
    });
    let mut meta = BTreeMap::new();
    for m in 0..rng.random_range(0..4) {
        meta.insert(
            format!("key{m}"),
            format!("value {}", rng.random_range(0..100)),
        );
    }
    EmbeddingBundle::new(rows, dim, data, ids, labels, class_names, meta).unwrap()
}

fn random_checkpoint(rng: &mut ChaCha8Rng) -> (SaeModel, CheckpointInfo) {
    let d = rng.random_range(1..7);
    let n = d * rng.random_range(1..5);
    let k = rng.random_range(1..=n);
    let mut dead = vec![false; n];
    let spare = n - k;
    for j in 0..n {
        if dead.iter().filter(|&&b| b).count() < spare && rng.random_bool(0.3) {
            dead[j] = true;
        }
    }
    let mut v =
        |len: usize| -> Vec<f64> { (0..len).map(|_| rng.random_range(-5.0..5.0)).collect() };
    let model = SaeModel::from_parts(d, n, k, v(n * d), v(d * n), v(d), v(n), dead)
        .unwrap()
        .with_selection(if rng.random_bool(0.5) {
            Selection::Magnitude
        } else {
            Selection::Signed
        });
    let info = CheckpointInfo {
        step: rng.random_range(0..100_000),
        selection: model.selection(),
        config: rng
            .random_bool(0.5)
            .then(|| serde_json::json!({"k": k, "note": "random"})),
    };
    (model, info)
}

#[derive(Debug, PartialEq)]
enum Kind {
    Format,
    Truncation,
}

fn kind(e: &Error) -> Option<Kind> {
    match e {
        Error::Format(_) => Some(Kind::Format),
        Error::Truncation { .. } => Some(Kind::Truncation),
        _ => None,
    }
}

fn set_u32(b: &mut [u8], at: usize, v: u32) {
    b[at..at + 4].copy_from_slice(&v.to_le_bytes());
}

fn set_u64(b: &mut [u8], at: usize, v: u64) {
    b[at..at + 8].copy_from_slice(&v.to_le_bytes());
}

fn get_u64(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

/// Header mutations and the error each must produce.
fn vseb_mutations(bytes: &[u8]) -> Vec<(String, Vec<u8>, Kind)> {
    let mut out = Vec::new();
    for i in 0..4 {
        let mut b = bytes.to_vec();
        b[i] ^= 0x20;
        out.push((format!("magic byte {i}"), b, Kind::Format));
    }
    for v in [0u32, 2, u32::MAX] {
        let mut b = bytes.to_vec();
        set_u32(&mut b, 4, v);
        out.push((format!("version {v}"), b, Kind::Format));
    }
    let mut b = bytes.to_vec();
    b[24] |= 0x02;
    out.push(("unknown flag".into(), b, Kind::Format));
    let len = bytes.len() as u64;
    // with zero rows every dim describes an empty payload, so only rows is
    // a meaningful target
    let fields: &[(&str, usize)] = if get_u64(bytes, 8) == 0 {
        &[("rows", 8)]
    } else {
        &[("rows", 8), ("dim", 16)]
    };
    for &(field, at) in fields {
        let mut b = bytes.to_vec();
        set_u64(&mut b, at, get_u64(bytes, at) + len);
        out.push((format!("{field} past end"), b, Kind::Truncation));
        let mut b = bytes.to_vec();
        set_u64(&mut b, at, u64::MAX);
        out.push((format!("{field} overflow"), b, Kind::Format));
    }
    for cut in 0..28 {
        let expected = if cut < 4 {
            Kind::Format
        } else {
            Kind::Truncation
        };
        out.push((format!("cut at {cut}"), bytes[..cut].to_vec(), expected));
    }
    out
}

fn vssa_mutations(bytes: &[u8], model: &SaeModel) -> Vec<(String, Vec<u8>, Kind)> {
    let mut out = Vec::new();
    for i in 0..4 {
        let mut b = bytes.to_vec();
        b[i] ^= 0x20;
        out.push((format!("magic byte {i}"), b, Kind::Format));
    }
    for v in [0u32, 2, u32::MAX] {
        let mut b = bytes.to_vec();
        set_u32(&mut b, 4, v);
        out.push((format!("version {v}"), b, Kind::Format));
    }
    let len = bytes.len() as u64;
    for (field, at) in [("dim", 8), ("latent_dim", 16)] {
        let mut b = bytes.to_vec();
        set_u64(&mut b, at, get_u64(bytes, at) + 8 * len);
        out.push((format!("{field} past end"), b, Kind::Truncation));
        let mut b = bytes.to_vec();
        set_u64(&mut b, at, u64::MAX / 2);
        out.push((format!("{field} overflow"), b, Kind::Format));
    }
    let n = model.latent_dim() as u64;
    for k in [0, n + 1] {
        let mut b = bytes.to_vec();
        set_u64(&mut b, 24, k);
        out.push((format!("k = {k}"), b, Kind::Format));
    }
    let mask_bytes = model.latent_dim().div_ceil(8);
    let mut b = bytes.to_vec();
    for byte in &mut b[32..32 + mask_bytes] {
        *byte = 0xFF;
    }
    let expected = Kind::Format;
    out.push(("all latents dead".into(), b, expected));
    for cut in 0..32 + mask_bytes {
        let expected = if cut < 4 {
            Kind::Format
        } else {
            Kind::Truncation
        };
        out.push((format!("cut at {cut}"), bytes[..cut].to_vec(), expected));
    }
    out
}

#[test]
fn a7_format_round_trips() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let dir = tempfile::tempdir().unwrap();
    let mut identical = 0;
    let mut rejected = 0;
    let mut mutations = 0;
    let mut failures: Vec<String> = Vec::new();
    for i in 0..1000 {
        let bundle = random_bundle(&mut rng);
        let bytes = bundle.to_bytes().unwrap();
        let path = dir.path().join("b.vseb");
        sparse_steer::bundle::save_bundle(&bundle, &path).unwrap();
        let reloaded = sparse_steer::bundle::load_bundle(&path).unwrap();
        let again = reloaded.to_bytes().unwrap();
        let b_ok = again == bytes && std::fs::read(&path).unwrap() == bytes && reloaded == bundle;

        let (model, info) = random_checkpoint(&mut rng);
        let cbytes = checkpoint_bytes(&model, &info).unwrap();
        let mpath = dir.path().join("m.vssa");
        sparse_steer::sae::save_model(&model, &info, &mpath).unwrap();
        let (m2, i2) = sparse_steer::sae::load_model(&mpath).unwrap();
        let c_again = checkpoint_bytes(&m2, &i2).unwrap();
        let m_ok = c_again == cbytes && i2 == info;
        if b_ok && m_ok {
            identical += 1;
        } else {
            failures.push(format!("round trip {i}"));
        }

        if i % 10 == 0 {
            for (name, b, want) in vseb_mutations(&bytes) {
                mutations += 1;
                match EmbeddingBundle::from_bytes(&b) {
                    Err(e) if kind(&e) == Some(want) => rejected += 1,
                    other => failures.push(format!("VSEB {name}: {other:?}")),
                }
            }
            for (name, b, want) in vssa_mutations(&cbytes, &model) {
                mutations += 1;
                match model_from_bytes(&b) {
                    Err(e) if kind(&e) == Some(want) => rejected += 1,
                    other => failures.push(format!("VSSA {name}: {:?}", other.map(|_| ()))),
                }
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = identical == 1000 && rejected == mutations && elapsed < Duration::from_secs(30);
    report(
        "A7",
        pass,
        &format!(
            "{identical}/1000 byte-identical cycles, {rejected}/{mutations} header mutations rejected with the expected error, {elapsed:.2?}"
        ),
    );
    assert!(
        failures.is_empty(),
        "{:?}",
        &failures[..failures.len().min(10)]
    );
    assert!(elapsed < Duration::from_secs(30));
}

// ---------- A8 ----------

#[test]
fn a8_pass_tightening() {
    let start = Instant::now();
    let task = class_task(&ClassTaskSpec::default()).unwrap();
    let base = TrainConfig {
        k: 4,
        batch_size: 128,
        epochs: 50,
        ..TrainConfig::default()
    };
    let topk = train_run(&base, &task.train).unwrap();
    let pass_run = train_run(
        &TrainConfig {
            mode: LossMode::Pass,
            w_aux: 0.8,
            ..base.clone()
        },
        &task.train,
    )
    .unwrap();
    let d_topk = o_intra_class_distance(&topk.model, &task.test);
    let d_pass = o_intra_class_distance(&pass_run.model, &task.test);

    // w_aux = 0 must retrace the topk run step for step
    let short = TrainConfig {
        epochs: 3,
        log_every: 1,
        ..base.clone()
    };
    let a = train_run(&short, &task.train).unwrap();
    let b = train_run(
        &TrainConfig {
            mode: LossMode::Pass,
            w_aux: 0.0,
            ..short.clone()
        },
        &task.train,
    )
    .unwrap();
    let mut worst = 0.0f64;
    for (ra, rb) in a.log.records.iter().zip(&b.log.records) {
        worst = worst.max((ra.loss - rb.loss).abs());
    }
    let same_len = a.log.records.len() == b.log.records.len() && a.log.records.len() > 10;

    // and the loss function itself agrees on a fixed model
    let rows: Vec<Vec<f64>> = (0..128).map(|i| task.train.row_f64(i)).collect();
    let labels = &task.train.labels().unwrap()[..128];
    let mut means = ClassMeanState::new(10, topk.model.latent_dim(), 0.99);
    let codes: Vec<_> = rows.iter().map(|x| topk.model.encode(x).unwrap()).collect();
    means.update(&codes, labels).unwrap();
    let params = LossParams {
        alpha_l1: 0.0,
        w_aux: 0.0,
    };
    let (l_topk, _) = compute_loss(&topk.model, &rows, None, LossMode::Topk, params, None).unwrap();
    let (l_pass, _) = compute_loss(
        &topk.model,
        &rows,
        Some(labels),
        LossMode::Pass,
        params,
        Some(&means),
    )
    .unwrap();
    worst = worst.max((l_topk - l_pass).abs());

    let elapsed = start.elapsed();
    let pass = d_pass < d_topk && worst <= 1e-9 && same_len;
    report(
        "A8",
        pass,
        &format!(
            "intra-class code distance pass {d_pass:.4} < topk {d_topk:.4}; w_aux=0 max loss gap {worst:.1e}; {elapsed:.2?}"
        ),
    );
    assert!(d_pass < d_topk);
    assert!(same_len);
    assert!(worst <= 1e-9);
}
