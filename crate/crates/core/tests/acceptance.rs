//! Acceptance criteria 1 to 8. Each test writes one `criterion N ... PASS`
//! or `FAIL` line straight to standard error, so the verdicts show up in the
//! test log even when output capture is on.

use std::io::Write;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fmit::crf::Potentials;
use fmit::data::{generate_corpus, Corpus, GeneratorSpec, Vocab};
use fmit::gradcheck::GradCheckOptions;
use fmit::labels::EntityType;
use fmit::lattice::{FlatLattice, Modality, ObjectAnnotation};
use fmit::model::{check_gradients, gradcheck_sample, ModelConfig};
use fmit::posenc::{distance_quad, relative_encoding};
use fmit::tensor::Tensor;
use fmit::trainer::{evaluate, train, AnyModel, TrainConfig};

fn verdict(n: u32, title: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "criterion {n} ({title}) ... {status}: {detail}");
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

/// Every label sequence scored from the definition; returns
/// `(log Σ exp(score), max score)`.
fn enumerate(em: &[f64], n: usize, k: usize, trans: &[f64], start: &[f64], stop: &[f64]) -> (f64, f64) {
    let mut scores = Vec::new();
    let mut y = vec![0usize; n];
    loop {
        let mut s = start[y[0]] + stop[y[n - 1]];
        for t in 0..n {
            s += em[t * k + y[t]];
            if t > 0 {
                s += trans[y[t - 1] * k + y[t]];
            }
        }
        scores.push(s);
        let mut pos = 0;
        while pos < n {
            y[pos] += 1;
            if y[pos] < k {
                break;
            }
            y[pos] = 0;
            pos += 1;
        }
        if pos == n {
            break;
        }
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    (log_z, max)
}

#[test]
fn criterion_1_crf_matches_enumeration() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst_z, mut worst_v) = (0f64, 0f64);
    for _ in 0..200 {
        let n = rng.gen_range(1..=6);
        let k = rng.gen_range(1..=5);
        let mut vals = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.gen_range(-3.0..3.0)).collect() };
        let em = vals(n * k);
        let trans = vals(k * k);
        let start = vals(k);
        let stop = vals(k);
        let (oracle_z, oracle_max) = enumerate(&em, n, k, &trans, &start, &stop);

        let em_t = Tensor::new(vec![n, k], em).unwrap();
        let (tr_t, st_t, sp_t) = (
            Tensor::new(vec![k, k], trans).unwrap(),
            Tensor::vector(start),
            Tensor::vector(stop),
        );
        let pot = Potentials::new(&em_t, Some((&tr_t, &st_t, &sp_t))).unwrap();
        worst_z = worst_z.max((pot.log_partition() - oracle_z).abs());
        let (path, score) = pot.viterbi();
        let rescored = pot.sequence_score(&path).unwrap();
        worst_v = worst_v
            .max((score - oracle_max).abs())
            .max((rescored - oracle_max).abs());
    }
    let elapsed = started.elapsed();
    let pass = worst_z <= 1e-8 && worst_v <= 1e-10 && elapsed < Duration::from_secs(10);
    verdict(
        1,
        "CRF oracle equivalence",
        pass,
        &format!(
            "200 instances, max |logZ diff| {worst_z:.2e}, max |viterbi diff| {worst_v:.2e}, {:.2}s",
            secs(elapsed)
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_2_gradient_integrity() {
    let sample = gradcheck_sample();
    assert_eq!((sample.len(), sample.objects.len()), (4, 2));
    let config = ModelConfig {
        d: 16,
        layers: 1,
        heads: 2,
        ..Default::default()
    };
    let opts = GradCheckOptions {
        step: 1e-5,
        tolerance: 1e-4,
        ..Default::default()
    };
    let started = Instant::now();
    let report = check_gradients(&config, 0, 0.25, &opts).unwrap();
    let elapsed = started.elapsed();
    let worst_abs = report.params.iter().map(|p| p.max_abs_err).fold(0.0, f64::max);
    let pass = report.passed() && elapsed < Duration::from_secs(60);
    verdict(
        2,
        "gradient integrity",
        pass,
        &format!(
            "{} tensors, max rel err {:.2e}, max abs err {worst_abs:.2e}, {:.2}s",
            report.params.len(),
            report.max_rel_err(),
            secs(elapsed)
        ),
    );
    assert!(pass, "{report}");
}

fn random_lattice(rng: &mut ChaCha8Rng) -> FlatLattice {
    let n = rng.gen_range(1..=7);
    let tokens: Vec<usize> = (0..n).map(|_| rng.gen_range(4..20)).collect();
    let objects: Vec<ObjectAnnotation> = (0..rng.gen_range(0..=4))
        .map(|o| match rng.gen_range(0..3) {
            0 => ObjectAnnotation::whole(o),
            1 => ObjectAnnotation::general(o),
            _ => {
                let a = rng.gen_range(1..=n);
                let b = rng.gen_range(a..=n);
                ObjectAnnotation::phrase(o, a, b)
            }
        })
        .collect();
    FlatLattice::build(&tokens, &objects, Vocab::specials()).unwrap()
}

fn random_projection(rng: &mut ChaCha8Rng, d: usize) -> Tensor<f64> {
    let bound = 1.0 / (4.0 * d as f64).sqrt();
    Tensor::new(
        vec![d, 4 * d],
        (0..4 * d * d).map(|_| rng.gen_range(-bound..bound)).collect(),
    )
    .unwrap()
}

#[test]
fn criterion_3_position_encoding_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 16;
    let mut failures = Vec::new();

    for _ in 0..20 {
        let lattice = random_lattice(&mut rng);
        let wr = random_projection(&mut rng, d);
        let offset = rng.gen_range(-50..50);
        let a = relative_encoding(lattice.cells(), &wr).unwrap();
        let b = relative_encoding(lattice.shifted(offset).cells(), &wr).unwrap();
        if a.values.data() != b.values.data() {
            failures.push(format!("translation by {offset} changed R"));
        }

        let cells = lattice.cells();
        for (i, ci) in cells.iter().enumerate() {
            for (j, cj) in cells.iter().enumerate() {
                let q = distance_quad(ci, cj);
                let r = distance_quad(cj, ci);
                if q.hh != -r.hh || q.ht != -r.th {
                    failures.push(format!("antisymmetry broken at ({i}, {j})"));
                }
                if ci.modality == Modality::Word && cj.modality == Modality::Word {
                    let expect = ci.head - cj.head;
                    if q.as_array() != [expect; 4] {
                        failures.push(format!("word pair ({i}, {j}) gives {:?}", q.as_array()));
                    }
                }
            }
        }
    }

    // words at positions 1..=6; cell k+1 to cell 1 is +k, the reverse is -k
    let line = FlatLattice::build(&[4, 5, 6, 7, 8, 9], &[], Vocab::specials()).unwrap();
    let mut distinct = 0;
    for _ in 0..20 {
        let wr = random_projection(&mut rng, d);
        let r = relative_encoding(line.cells(), &wr).unwrap();
        for k in 1..=5 {
            if r.pair(1 + k, 1) != r.pair(1, 1 + k) {
                distinct += 1;
            } else {
                failures.push(format!("R(+{k}) equals R(-{k})"));
            }
        }
    }

    let pass = failures.is_empty();
    verdict(
        3,
        "position-encoding invariants",
        pass,
        &format!(
            "20 random lattices, {distinct}/100 direction checks distinct, {} violations{}",
            failures.len(),
            failures.first().map_or(String::new(), |f| format!(" (first: {f})"))
        ),
    );
    assert!(pass, "{failures:?}");
}

fn overfit_corpus() -> Corpus {
    generate_corpus(&GeneratorSpec {
        seed: 11,
        train: 32,
        dev: 0,
        test: 0,
        ..Default::default()
    })
    .unwrap()
}

fn overfit_model() -> ModelConfig {
    ModelConfig {
        d: 32,
        heads: 4,
        layers: 2,
        ..Default::default()
    }
}

#[test]
fn criterion_4_overfit() {
    let corpus = overfit_corpus();
    assert_eq!(corpus.train.len(), 32);
    let config = TrainConfig {
        epochs: 500,
        seed: 5,
        target_train_f1: Some(1.0),
        ..Default::default()
    };
    let started = Instant::now();
    let out = train::<f32>(&overfit_model(), &config, &corpus.train, &[]).unwrap();
    let elapsed = started.elapsed();
    let f1 = evaluate(&out.last, &corpus.train, config.max_len).unwrap().f1();
    let pass = f1 == 1.0 && elapsed < Duration::from_secs(300);
    verdict(
        4,
        "overfit",
        pass,
        &format!("train F1 {f1:.4} after {} epochs, {:.1}s", out.log.len(), secs(elapsed)),
    );
    assert!(pass);
}

#[test]
fn criterion_5_multimodal_utility() {
    let mut lines = Vec::new();
    let mut pass = true;
    for seed in 1..=3 {
        let spec = GeneratorSpec {
            seed,
            types: vec![EntityType::Per, EntityType::Loc],
            ambiguity: 0.5,
            train: 300,
            dev: 50,
            test: 200,
            ..Default::default()
        };
        let corpus = generate_corpus(&spec).unwrap();
        let config = TrainConfig {
            epochs: 40,
            seed,
            ..Default::default()
        };
        let mut f1 = [0.0; 2];
        for (slot, no_objects) in [false, true].into_iter().enumerate() {
            let model = ModelConfig {
                no_objects,
                ..overfit_model()
            };
            let out = train::<f32>(&model, &config, &corpus.train, &corpus.dev).unwrap();
            f1[slot] = evaluate(&out.best, &corpus.test, config.max_len).unwrap().f1();
        }
        let ok = f1[0] >= 0.95 && f1[1] <= 0.80;
        pass &= ok;
        lines.push(format!(
            "seed {seed}: full {:.4}, no_objects {:.4} (text-only ceiling {:.3})",
            f1[0], f1[1], corpus.stats.text_only_ambiguous_ceiling
        ));
    }
    verdict(5, "multimodal utility", pass, &lines.join("; "));
    assert!(pass, "{lines:?}");
}

#[test]
fn criterion_6_ebd_effect() {
    let started = Instant::now();
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..10 {
        let spec = GeneratorSpec {
            seed,
            visual_bias: 0.5,
            train: 200,
            dev: 50,
            test: 200,
            ..Default::default()
        };
        let corpus = generate_corpus(&spec).unwrap();
        let config = TrainConfig {
            epochs: 30,
            lr: 1e-3,
            seed,
            ..Default::default()
        };
        let mut precision = [0.0; 2];
        for (slot, no_ebd) in [false, true].into_iter().enumerate() {
            let model = ModelConfig {
                no_ebd,
                ..overfit_model()
            };
            let out = train::<f32>(&model, &config, &corpus.train, &corpus.dev).unwrap();
            precision[slot] = evaluate(&out.best, &corpus.test, config.max_len).unwrap().precision();
        }
        if precision[0] >= precision[1] {
            wins += 1;
        }
        lines.push(format!("{:.3}/{:.3}", precision[0], precision[1]));
    }

    // λ = 0 leaves the main tower exactly where training without EBD puts it
    let corpus = generate_corpus(&GeneratorSpec {
        seed: 4,
        visual_bias: 0.5,
        train: 48,
        dev: 16,
        test: 0,
        ..Default::default()
    })
    .unwrap();
    let config = TrainConfig {
        epochs: 3,
        lambda: 0.0,
        seed: 4,
        ..Default::default()
    };
    let with = train::<f64>(&overfit_model(), &config, &corpus.train, &corpus.dev).unwrap();
    let without = train::<f64>(
        &ModelConfig {
            no_ebd: true,
            ..overfit_model()
        },
        &config,
        &corpus.train,
        &corpus.dev,
    )
    .unwrap();
    let mut shared = 0;
    let mut identical = true;
    for (name, t) in without.last.params.iter() {
        shared += 1;
        identical &= with.last.params.get(name).is_ok_and(|u| u.data() == t.data());
    }
    let dev_equal = with
        .log
        .iter()
        .zip(&without.log)
        .all(|(a, b)| a.dev_f1 == b.dev_f1 && a.dev_precision == b.dev_precision);

    let pass = wins >= 7 && identical && dev_equal;
    verdict(
        6,
        "EBD effect",
        pass,
        &format!(
            "EBD precision >= no-EBD in {wins}/10 seeds [{}]; lambda=0 main tower bitwise equal over {shared} tensors: {}; {:.0}s",
            lines.join(" "),
            identical && dev_equal,
            secs(started.elapsed())
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_7_determinism_and_persistence() {
    let corpus = generate_corpus(&GeneratorSpec {
        seed: 7,
        train: 40,
        dev: 20,
        test: 20,
        ..Default::default()
    })
    .unwrap();
    let config = TrainConfig {
        epochs: 4,
        seed: 7,
        ..Default::default()
    };
    let a = train::<f32>(&overfit_model(), &config, &corpus.train, &corpus.dev).unwrap();
    let b = train::<f32>(&overfit_model(), &config, &corpus.train, &corpus.dev).unwrap();
    let same_log = a.log == b.log;
    let same_params = a.best.params.bitwise_eq(&b.best.params) && a.last.params.bitwise_eq(&b.last.params);
    let bytes = |o: &fmit::trainer::TrainOutcome<f32>| {
        o.best
            .to_checkpoint(serde_json::Value::Null)
            .unwrap()
            .to_bytes()
            .unwrap()
    };
    let same_bytes = bytes(&a) == bytes(&b);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    a.best
        .to_checkpoint(serde_json::json!({"best_epoch": a.best_epoch}))
        .unwrap()
        .save(&path)
        .unwrap();
    let loaded = AnyModel::load(&path).unwrap();
    let before = evaluate(&a.best, &corpus.test, config.max_len).unwrap();
    let after = loaded.evaluate(&corpus.test, config.max_len).unwrap();
    let decoded_before = fmit::trainer::decode(&a.best, &corpus.test, config.max_len).unwrap();
    let decoded_after = loaded.decode(&corpus.test, config.max_len).unwrap();
    let persisted = before == after && decoded_before == decoded_after && loaded == AnyModel::F32(a.best.clone());

    let pass = same_log && same_params && same_bytes && persisted;
    verdict(
        7,
        "determinism and persistence",
        pass,
        &format!(
            "metrics equal: {same_log}, parameters bitwise equal: {same_params}, checkpoint bytes equal: {same_bytes}, \
             save/load evaluation equal: {persisted}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_8_layer_counts() {
    let corpus = overfit_corpus();
    let config = TrainConfig {
        epochs: 25,
        seed: 5,
        ..Default::default()
    };
    let mut lines = Vec::new();
    let mut pass = true;
    for layers in 1..=3 {
        let model = ModelConfig {
            layers,
            ..overfit_model()
        };
        let result = train::<f32>(&model, &config, &corpus.train, &[]).and_then(|out| {
            Ok((
                out.log.last().map(|e| e.train_loss),
                evaluate(&out.last, &corpus.train, 128)?,
            ))
        });
        match result {
            Ok((Some(loss), report)) if loss.is_finite() => {
                lines.push(format!("l={layers}: loss {loss:.3}, train F1 {:.3}", report.f1()));
            }
            other => {
                pass = false;
                lines.push(format!("l={layers}: {:?}", other.map(|(l, _)| l)));
            }
        }
    }
    verdict(8, "layer-count configurability", pass, &lines.join("; "));
    assert!(pass, "{lines:?}");
}
