//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::{Duration, Instant};

use afine_core::backbone::extract_pyramid;
use afine_core::data::{aggregate_all, dataset_statistics, read_votes, split_dataset, Label, Vote};
use afine_core::eval::{evaluate, AfineMetric};
use afine_core::fidelity::fidelity_score;
use afine_core::model::{image_features, score_features};
use afine_core::synthetic;
use afine_core::train::{
    changed_entries, gradient_check, group_fingerprint, mean_loss, preference_probability, train_phase,
    fidelity_loss, GradientCheckOptions, Objective, Phase, TrainConfig, TrainOptions, TrainingSet,
};
use afine_core::{
    adaptive_lambda, calibrate, compose_score, BackboneConfig, FidelityWeights, Image, ModelParameters, ParamGroup,
    ParamMask,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn verdict(name: &str, ok: bool, detail: impl std::fmt::Display) {
    println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{name}: {detail}");
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    Image::from_fn(h, w, |_| rng.random_range(0.0..=1.0)).unwrap()
}

#[test]
fn fidelity_self_distance() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = ModelParameters::init(BackboneConfig::toy(1)).unwrap();
    let normal = Normal::new(0.0, 2.0).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let side = 8 * rng.random_range(2..=6);
        let img = random_image(&mut rng, side, side);
        let pyr = extract_pyramid(&img, &params.backbone).unwrap();
        let mut w = FidelityWeights::for_backbone(params.config()).unwrap();
        w.alpha_logits.mapv_inplace(|_| normal.sample(&mut rng));
        w.beta_logits.mapv_inplace(|_| normal.sample(&mut rng));
        worst = worst.max(fidelity_score(&pyr, &pyr, &w).unwrap().abs());
    }
    let elapsed = start.elapsed();
    verdict(
        "fidelity self-distance",
        worst <= 1e-6 && elapsed < Duration::from_secs(30),
        format!("max |F(p,p)| = {worst:.3e} over 50 images, {:.2?}", elapsed),
    );
}

#[test]
fn calibration_contract() {
    let mut ok = true;
    let mut detail = Vec::new();
    for (p3, p4) in [(0.0, 1.0), (0.37, -0.25), (-1.5, 3.0), (2.0, 1e-3)] {
        let mid = calibrate(p3, p3, p4).unwrap();
        let lo = p3 - 30.0 * f64::abs(p4);
        let hi = p3 + 30.0 * f64::abs(p4);
        let values: Vec<f64> = (0..10_000)
            .map(|i| calibrate(lo + (hi - lo) * i as f64 / 9_999.0, p3, p4).unwrap())
            .collect();
        let inside = values.iter().all(|v| *v > -2.0 && *v < 2.0);
        let increasing = values.windows(2).all(|w| w[1] > w[0]);
        ok &= mid.abs() <= 1e-9 && inside && increasing;
        detail.push(format!("(p3={p3}, p4={p4}): mid {mid:.1e} inside {inside} increasing {increasing}"));
    }
    verdict("calibration contract", ok, detail.join("; "));
}

#[test]
fn lambda_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = ModelParameters::init(BackboneConfig::toy(3)).unwrap();
    let c = params.calibration;
    let mut worst: f64 = 0.0;
    let mut identity = true;
    for _ in 0..100 {
        let x = random_image(&mut rng, 16, 16);
        let y = random_image(&mut rng, 16, 16);
        let nx = calibrate(image_features(&x, &params).unwrap().naturalness, c.gamma3, c.gamma4).unwrap();
        let ny = calibrate(image_features(&y, &params).unwrap().naturalness, c.gamma3, c.gamma4).unwrap();
        let k = rng.random_range(0.0..3.0);
        identity &= adaptive_lambda(nx, nx, k) == 1.0;
        worst = worst.max((adaptive_lambda(nx, ny, k) * adaptive_lambda(ny, nx, k) - 1.0).abs());
    }
    verdict(
        "lambda contract",
        identity && worst <= 1e-9,
        format!("lambda(x,x)=1 exactly: {identity}; max |lambda(x,y) lambda(y,x) - 1| = {worst:.1e}"),
    );
}

#[test]
fn loss_contract() {
    let grid: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
    let diag = grid.iter().map(|&p| fidelity_loss(p, p)).fold(0.0, f64::max);
    let corner = fidelity_loss(1.0, 0.0);
    let in_range = grid
        .iter()
        .all(|&p| grid.iter().all(|&q| (0.0..=1.0).contains(&fidelity_loss(p, q))));
    verdict(
        "loss contract",
        diag <= 1e-12 && corner == 1.0 && in_range,
        format!("max loss(p,p) = {diag:.1e}; loss(1,0) = {corner}; all in [0,1]: {in_range}"),
    );
}

#[test]
fn thurstone_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut equal: f64 = 0.0;
    let mut sum: f64 = 0.0;
    for _ in 0..1000 {
        let a = rng.random_range(-10.0..10.0);
        let b = rng.random_range(-10.0..10.0);
        equal = equal.max((preference_probability(a, a) - 0.5).abs());
        sum = sum.max((preference_probability(a, b) + preference_probability(b, a) - 1.0).abs());
    }
    let at_sqrt2 = preference_probability(0.0, std::f64::consts::SQRT_2);
    verdict(
        "thurstone contract",
        equal <= 1e-12 && sum <= 1e-12 && (at_sqrt2 - 0.8413).abs() <= 1e-4,
        format!("equal-score error {equal:.1e}; complement error {sum:.1e}; p(gap sqrt2) = {at_sqrt2:.6}"),
    );
}

fn small_training_set(seed: u64) -> TrainingSet {
    let contents = synthetic::generate(2, &[1.0, 3.0], 16, seed);
    let triplets = synthetic::triplets(&contents);
    afine_core::data::build_training_set(&triplets, |id| Ok(synthetic::find(&contents, id).unwrap().clone())).unwrap()
}

#[test]
fn gradient_verification() {
    let start = Instant::now();
    let mut params = ModelParameters::init(BackboneConfig::toy(7)).unwrap();
    // move off the symmetric starting point so every group has a generic gradient
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    params.fidelity.alpha_logits.mapv_inplace(|_| rng.random_range(-1.0..1.0));
    params.fidelity.beta_logits.mapv_inplace(|_| rng.random_range(-1.0..1.0));
    params.calibration.eta3 = 0.2;
    params.calibration.eta4 = 0.7;
    params.calibration.gamma3 = -0.1;
    params.calibration.gamma4 = 1.3;
    params.scale.k_raw = 0.3;
    let set = small_training_set(7);
    // step 1e-4 keeps the central-difference truncation error near 1e-5
    // on the backbone; the scalar and logit groups are also held at 1e-3
    let fine = GradientCheckOptions {
        step: 1e-4,
        samples_per_tensor: 6,
        seed: 7,
        ..Default::default()
    };
    let report = gradient_check(&params, &set.images, &set.triplets, ParamMask::all(), |_| true, &fine).unwrap();
    let coarse = GradientCheckOptions {
        samples_per_tensor: 6,
        seed: 7,
        ..Default::default()
    };
    let heads = |name: &str| {
        matches!(
            ParamGroup::of(name),
            Some(ParamGroup::Fidelity | ParamGroup::Scale | ParamGroup::Calibration)
        )
    };
    let head_report = gradient_check(&params, &set.images, &set.triplets, ParamMask::all(), heads, &coarse).unwrap();
    let groups: BTreeSet<ParamGroup> = report.entries.iter().filter_map(|e| ParamGroup::of(&e.name)).collect();
    let worst = report.worst().unwrap();
    let elapsed = start.elapsed();
    verdict(
        "gradient verification",
        groups.len() == 5
            && report.max_relative_error() < 1e-3
            && head_report.max_relative_error() < 1e-3
            && elapsed < Duration::from_secs(300),
        format!(
            "{} entries over {} groups, max relative error {:.2e} at step 1e-4 ({}[{}]: analytic {:.6e} numeric {:.6e}); \
             fidelity/scale/calibration at step 1e-3 {:.2e}; {:.2?}",
            report.entries.len(),
            groups.len(),
            worst.relative_error,
            worst.name,
            worst.index,
            worst.analytic,
            worst.numeric,
            head_report.max_relative_error(),
            elapsed
        ),
    );
}

#[test]
fn phase_masking() {
    let params = ModelParameters::init(BackboneConfig::toy(8)).unwrap();
    let set = small_training_set(8);
    let mut cfg = TrainConfig::for_phase(Phase::Two);
    cfg.max_iters = 100;
    cfg.batch_size = 4;
    cfg.learning_rate = 1e-2;
    let before = (
        group_fingerprint(&params, ParamGroup::Backbone),
        group_fingerprint(&params, ParamGroup::Naturalness),
    );
    let after2 = train_phase(params.clone(), &set, &cfg, &TrainOptions::default()).unwrap().params;
    let after = (
        group_fingerprint(&after2, ParamGroup::Backbone),
        group_fingerprint(&after2, ParamGroup::Naturalness),
    );
    let fidelity_moved = group_fingerprint(&after2, ParamGroup::Fidelity) != group_fingerprint(&params, ParamGroup::Fidelity);

    let mut cfg3 = TrainConfig::for_phase(Phase::Three);
    cfg3.max_iters = 20;
    cfg3.batch_size = 4;
    let after3 = train_phase(after2.clone(), &set, &cfg3, &TrainOptions::default()).unwrap().params;
    let changed = changed_entries(&after2, &after3);
    let names: BTreeSet<&str> = changed.iter().map(|(n, _)| n.as_str()).collect();
    let expected: BTreeSet<&str> =
        ["calibration.eta3", "calibration.eta4", "calibration.gamma3", "calibration.gamma4", "scale.k_raw"].into();
    verdict(
        "phase masking",
        before == after && fidelity_moved && changed.len() == 5 && names == expected,
        format!(
            "phase 2: backbone/head unchanged {}, fidelity moved {fidelity_moved}; phase 3 changed {} scalars {:?}",
            before == after,
            changed.len(),
            names
        ),
    );
}

#[test]
fn synthetic_end_to_end() {
    let start = Instant::now();
    let levels = [1.0, 2.0, 3.0, 4.0];
    let contents = synthetic::generate(200, &levels, 32, 2024);
    let ids: Vec<String> = contents.iter().map(|c| c.id.clone()).collect();
    let split = split_dataset(&ids, (0.7, 0.1, 0.2), 2024).unwrap();
    let part = |names: &[String]| -> Vec<synthetic::SyntheticContent> {
        contents.iter().filter(|c| names.contains(&c.id)).cloned().collect()
    };
    let (train_c, val_c, test_c) = (part(&split.train), part(&split.val), part(&split.test));
    let load = |set: &[synthetic::SyntheticContent]| {
        let set = set.to_vec();
        move |id: &str| Ok(synthetic::find(&set, id).expect("known id").clone())
    };
    let train = afine_core::data::build_training_set(&synthetic::triplets(&train_c), load(&train_c)).unwrap();
    let val = afine_core::eval::validation_set(&synthetic::eval_pairs(&val_c), load(&val_c)).unwrap();

    let mut params = ModelParameters::init(BackboneConfig::toy(2024)).unwrap();
    let initial_loss = mean_loss(&params, &train, Objective::Full).unwrap();
    let schedule = [(Phase::One, 500, 2e-3), (Phase::Two, 1000, 0.2), (Phase::Three, 500, 5e-2)];
    let mut total_iters = 0;
    for (phase, iters, lr) in schedule {
        let cfg = TrainConfig {
            learning_rate: lr,
            max_iters: iters,
            batch_size: 16,
            cosine_period_iters: iters,
            checkpoint_every: 250,
            seed: 2024 + phase.number() as u64,
            ..TrainConfig::for_phase(phase)
        };
        total_iters += iters;
        let options = TrainOptions {
            validation: Some(&val),
            checkpoint_dir: None,
        };
        params = train_phase(params, &train, &cfg, &options).unwrap().params;
        println!(
            "  after phase {}: train loss {:.4}, {:.1?}",
            phase.number(),
            mean_loss(&params, &train, Objective::Full).unwrap(),
            start.elapsed()
        );
    }
    let final_loss = mean_loss(&params, &train, Objective::Full).unwrap();

    let test_set = test_c.clone();
    let loader = move |id: &str| Ok(synthetic::find(&test_set, id).expect("known id").clone());
    let report = evaluate(&AfineMetric { params }, &synthetic::eval_pairs(&test_c), &loader).unwrap();
    let accuracy = report.overall.accuracy.unwrap();
    let elapsed = start.elapsed();
    verdict(
        "synthetic end-to-end",
        total_iters <= 2000
            && accuracy >= 95.0
            && final_loss < 0.25 * initial_loss
            && elapsed < Duration::from_secs(600),
        format!(
            "held-out accuracy {accuracy:.2}% over {} pairs; loss {initial_loss:.4} -> {final_loss:.4} ({:.1}%); {total_iters} iterations, {:.1?}",
            report.overall.count,
            100.0 * final_loss / initial_loss,
            elapsed
        ),
    );
}

/// Writes 1000 annotated pairs (three votes each, lines shuffled) whose
/// labels are fixed by construction, 37 of them one-of-each ties.
fn write_planted_votes(path: &Path) -> Vec<(String, String, Label)> {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let mut tie_slots: BTreeSet<usize> = BTreeSet::new();
    while tie_slots.len() < 37 {
        tie_slots.insert(rng.random_range(0..1000));
    }
    let mut table = Vec::new();
    let mut lines = Vec::new();
    for i in 0..1000 {
        let reference = format!("ref{:03}.png", i / 10);
        let test = format!("ref{:03}_t{}.png", i / 10, i % 10);
        let (label, votes) = if tie_slots.contains(&i) {
            (Label::Outlier, vec![Vote::Worse, Vote::Similar, Vote::Better])
        } else {
            let winner = Vote::ALL[rng.random_range(0..3)];
            let third = if rng.random_bool(0.5) { winner } else { Vote::ALL[(winner as usize + rng.random_range(1..3)) % 3] };
            (Label::Vote(winner), vec![winner, winner, third])
        };
        for (s, v) in votes.iter().enumerate() {
            lines.push(format!("{reference},{test},{v},subject{s}"));
        }
        table.push((reference, test, label));
    }
    use rand::seq::SliceRandom;
    lines.shuffle(&mut rng);
    std::fs::write(path, format!("reference_path,test_path,vote,subject_id\n{}\n", lines.join("\n"))).unwrap();
    table
}

#[test]
fn aggregation_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("votes.csv");
    let mut table = write_planted_votes(&path);
    let mut labels: Vec<(String, String, Label)> = aggregate_all(&read_votes(&path).unwrap())
        .unwrap()
        .into_iter()
        .map(|l| (l.reference_id, l.test_id, l.label))
        .collect();
    table.sort_by(|a, b| (&a.0, &a.1).cmp(&(&b.0, &b.1)));
    labels.sort_by(|a, b| (&a.0, &a.1).cmp(&(&b.0, &b.1)));
    let stats = dataset_statistics(
        &labels
            .iter()
            .map(|(r, t, l)| afine_core::data::AggregatedLabel {
                reference_id: r.clone(),
                test_id: t.clone(),
                label: *l,
            })
            .collect::<Vec<_>>(),
    );
    let fraction = stats.outlier_fraction();
    verdict(
        "aggregation oracle",
        labels == table && (fraction - 0.037).abs() < 1e-12,
        format!(
            "{} pairs, table match {}, outlier fraction {:.1}%",
            labels.len(),
            labels == table,
            100.0 * fraction
        ),
    );
}

#[test]
fn split_contract() {
    let ids: Vec<String> = (0..100).map(|i| format!("content{i:03}")).collect();
    let a = split_dataset(&ids, (0.7, 0.1, 0.2), 11).unwrap();
    let b = split_dataset(&ids, (0.7, 0.1, 0.2), 11).unwrap();
    let (tr, va, te): (BTreeSet<_>, BTreeSet<_>, BTreeSet<_>) = (
        a.train.iter().collect(),
        a.val.iter().collect(),
        a.test.iter().collect(),
    );
    let disjoint = tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te);
    let covers = tr.len() + va.len() + te.len() == 100;
    let sizes = (a.train.len(), a.val.len(), a.test.len());
    verdict(
        "split contract",
        sizes == (70, 10, 20) && disjoint && covers && a == b,
        format!("sizes {sizes:?}, disjoint {disjoint}, covering {covers}, seed-stable {}", a == b),
    );
}

#[test]
fn standard_fr_reversion() {
    let params = ModelParameters::init(BackboneConfig::toy(12)).unwrap();
    let reference = synthetic::texture(32, 12);
    let rx = image_features(&reference, &params).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let k = 2.0;
    let nx = -2.0 + 1e-9;
    let mut rows = Vec::new();
    for i in 0..20 {
        let test = synthetic::degrade(&reference, 0.25 * (i + 1) as f64, 100 + i as u64);
        let f_eta = score_features(&rx, &image_features(&test, &params).unwrap(), &params)
            .unwrap()
            .fidelity;
        let ny = 2.0 - rng.random_range(1e-9..1e-3);
        rows.push((f_eta, compose_score(f_eta, nx, ny, k)));
    }
    let order = |key: fn(&(f64, f64)) -> f64| {
        let mut idx: Vec<usize> = (0..rows.len()).collect();
        idx.sort_by(|&a, &b| key(&rows[a]).total_cmp(&key(&rows[b])));
        idx
    };
    let by_f = order(|r| r.0);
    let by_d = order(|r| r.1);
    let agree = by_f.iter().zip(&by_d).filter(|(a, b)| a == b).count();
    verdict(
        "standard-FR reversion",
        agree == 20,
        format!("rank agreement {agree}/20 at k = {k}, naturalness gap {:.6}", nx - 2.0),
    );
}
