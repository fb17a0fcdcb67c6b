use pattern_atlas::clustering::{fit_kmeans, KMeansParams};
use pattern_atlas::feature_store::{normalize, FeatureSet, TileRecord};
use pattern_atlas::model_selection::{sweep_k, SelectionMethod, SweepParams};
use pattern_atlas::synthetic::{generate_corpus, CorpusSpec};

fn corpus(seed: u64) -> FeatureSet {
    normalize(
        &generate_corpus(&CorpusSpec::desk_scale(seed))
            .unwrap()
            .feature_set,
    )
    .unwrap()
}

fn with_threads<T: Send>(n: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .unwrap()
        .install(f)
}

#[test]
fn fits_do_not_depend_on_thread_count() {
    let fs = corpus(3);
    let fit = |n| {
        with_threads(n, || {
            let f = fit_kmeans(&fs, &KMeansParams::new(15, 9)).unwrap();
            (f.model, f.assignment, f.inertia_history)
        })
    };
    let one = fit(1);
    assert_eq!(fit(2), one);
    assert_eq!(fit(8), one);
}

#[test]
fn sweeps_do_not_depend_on_thread_count() {
    let fs = corpus(5).subset_by_diagnosis("BCC");
    let sweep = |n| with_threads(n, || sweep_k(&fs, &SweepParams::new(2, 16, 21)).unwrap());
    let one = sweep(1);
    assert_eq!(sweep(3), one);
    assert_eq!(sweep(8), one);
}

#[test]
fn scaling_raw_features_leaves_the_model_unchanged() {
    let raw = generate_corpus(&CorpusSpec::desk_scale(8)).unwrap().feature_set;
    let scaled = |c: f64| {
        let records: Vec<TileRecord> = raw
            .records()
            .iter()
            .map(|r| TileRecord {
                features: r.features.iter().map(|v| v * c).collect(),
                ..r.clone()
            })
            .collect();
        normalize(&FeatureSet::from_records(raw.dim(), raw.label_set().to_vec(), records).unwrap()).unwrap()
    };
    let base = fit_kmeans(&normalize(&raw).unwrap(), &KMeansParams::new(12, 4)).unwrap();

    // powers of two scale exactly
    for c in [0.25, 8.0, 1024.0] {
        let fit = fit_kmeans(&scaled(c), &KMeansParams::new(12, 4)).unwrap();
        assert_eq!(fit.model, base.model, "c = {c}");
        assert_eq!(fit.assignment, base.assignment);
    }
    for c in [0.37, 3.3, 1e4] {
        let fit = fit_kmeans(&scaled(c), &KMeansParams::new(12, 4)).unwrap();
        assert_eq!(fit.assignment.clusters, base.assignment.clusters, "c = {c}");
        for (a, b) in fit
            .model
            .centroids
            .iter()
            .flatten()
            .zip(base.model.centroids.iter().flatten())
        {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

/// One class whose images show one or two of 10 latent prototypes; the
/// compactness choice over k = 2..20 for the recorded seed.
#[test]
fn compactness_recovers_the_prototype_count() {
    const PROTOTYPES: usize = 10;
    const SEED: u64 = 1;
    let mut spec = CorpusSpec::desk_scale(SEED);
    spec.labels = vec!["MEL".into()];
    assert_eq!(spec.prototypes, PROTOTYPES);
    let fs = normalize(&generate_corpus(&spec).unwrap().feature_set).unwrap();
    let mut sweep = sweep_k(&fs, &SweepParams::new(2, 20, SEED)).unwrap();
    sweep.select(SelectionMethod::Compactness).unwrap();
    let k = sweep.chosen_compactness_k.unwrap();
    assert!((PROTOTYPES - 1..=PROTOTYPES + 2).contains(&k), "k = {k}");
}
