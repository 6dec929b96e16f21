use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zsldg::evalharness::{argmax_lowest_id, class_accuracy, per_class_accuracy, predict, scores};
use zsldg::model::{Arch, ModelParams, Spaces};
use zsldg::synthdata::{gen_benchmark, BenchConfig, Dataset};

fn small_bench() -> Dataset {
    gen_benchmark(&BenchConfig {
        samples_per_class_domain: 6,
        ..BenchConfig::default()
    })
    .unwrap()
}

fn random_model(ds: &Dataset, seed: u64) -> ModelParams {
    let spaces = Spaces {
        visual_dim: ds.visual_dim,
        semantic_dim: ds.semantic_dim,
        latent_dim: 8,
        noise_dim: 4,
    };
    let arch = Arch {
        hidden_width: 16,
        ..Arch::default()
    };
    ModelParams::init(spaces, arch, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn argmax_survives_increasing_transforms() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let transforms: [fn(f64) -> f64; 4] = [|s| s.exp(), |s| 3.0 * s - 7.0, |s| s.powi(3), |s| s.tanh()];
    for _ in 0..500 {
        let k = rng.gen_range(1..9);
        // Coarse values so ties occur.
        let s: Vec<f64> = (0..k).map(|_| f64::from(rng.gen_range(-3i32..3)) * 0.5).collect();
        let mut ids: Vec<u32> = (0..k as u32).map(|i| i * 3 + 1).collect();
        ids.reverse();
        let best = argmax_lowest_id(&s, &ids);
        for t in transforms {
            let ts: Vec<f64> = s.iter().map(|&v| t(v)).collect();
            assert_eq!(argmax_lowest_id(&ts, &ids), best, "{s:?}");
        }
    }
}

#[test]
fn candidate_subsets_keep_the_prediction() {
    let ds = small_bench();
    let params = random_model(&ds, 1);
    let all: Vec<u32> = (0..ds.n_classes as u32).collect();
    let rows: Vec<usize> = (0..ds.len()).step_by(17).collect();
    let x = ds.features_of(&rows);
    let full = predict(&params, &x, &ds.semantic_table(&all), &all).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (r, p) in full.iter().enumerate() {
        let mut subset: Vec<u32> = all.iter().copied().filter(|&c| c == p.class || rng.gen_bool(0.4)).collect();
        subset.sort_unstable();
        let xr = ds.features_of(&rows[r..r + 1]);
        let sub = predict(&params, &xr, &ds.semantic_table(&subset), &subset).unwrap();
        assert_eq!(sub[0].class, p.class);
    }
}

#[test]
fn evaluation_leaves_parameters_untouched() {
    let ds = small_bench();
    let params = random_model(&ds, 3);
    let before = params.encode();
    let classes = ds.split.unseen_classes.clone();
    let rows = ds.select(&classes, &ds.split.unseen_domains);
    per_class_accuracy(&params, &ds, &rows, &classes).unwrap();
    scores(&params, &ds.features_of(&rows), &ds.semantic_table(&classes)).unwrap();
    assert_eq!(params.encode(), before);
}

#[test]
fn uniform_random_predictor_scores_one_over_k() {
    let (k, per_class, draws) = (5u32, 40usize, 2000);
    let classes: Vec<u32> = (0..k).collect();
    let truth: Vec<u32> = classes.iter().flat_map(|&c| std::iter::repeat(c).take(per_class)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let accs: Vec<f64> = (0..draws)
        .map(|_| {
            let pred: Vec<u32> = truth.iter().map(|_| rng.gen_range(0..k)).collect();
            class_accuracy(&truth, &pred, &classes).unwrap().mean
        })
        .collect();
    let p = 1.0 / f64::from(k);
    // Each per-class accuracy is Binomial(n, p) / n; the mean over k classes
    // has variance p (1 - p) / (n k).
    let sd = (p * (1.0 - p) / (per_class as f64 * f64::from(k))).sqrt();
    let mean = accs.iter().sum::<f64>() / draws as f64;
    let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
    assert!((mean - p).abs() < 4.0 * sd / (draws as f64).sqrt(), "mean {mean}");
    assert!((var.sqrt() / sd - 1.0).abs() < 0.1, "sd {} vs {sd}", var.sqrt());
}
