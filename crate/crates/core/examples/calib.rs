use radgear_core::backends::Backends;
use radgear_core::corpus::{generate_synthetic_corpus, SyntheticCorpusConfig};
use radgear_core::grounding::SyntheticGrounderConfig;
use radgear_core::labeler::DiseaseVocabulary;
use radgear_core::policy::{train, PolicyInit, TrainConfig};

fn main() {
    let ab_vocab = DiseaseVocabulary::new(vec![
        "Cardiomegaly".into(),
        "Edema".into(),
        "Pneumonia".into(),
        "Pleural Effusion".into(),
    ])
    .unwrap();

    for (num_studies, n_cand, epochs, lr, bias, sigma) in [
        (30usize, 1usize, 4u32, 1.0f64, 2.0f64, 4.0f64),
        (30, 1, 6, 1.0, 2.0, 4.0),
        (30, 1, 4, 0.5, 2.0, 4.0),
        (30, 1, 6, 0.5, 3.0, 4.0),
        (30, 1, 8, 0.5, 3.0, 4.0),
        (30, 2, 6, 0.5, 2.0, 4.0),
        (50, 1, 6, 0.5, 2.0, 5.0),
        (30, 1, 6, 0.5, 2.0, 6.0),
    ] {
        let ab_corpus = generate_synthetic_corpus(
            &SyntheticCorpusConfig {
                seed: 99,
                num_studies,
                k: 4,
                positive_rate: 0.5,
                noise_rate: 0.2,
                num_candidates: n_cand,
                ..Default::default()
            },
            &ab_vocab,
        )
        .unwrap();
        let ab_backends = Backends::deterministic(SyntheticGrounderConfig {
            blob_sigma: sigma,
            ..Default::default()
        })
        .unwrap();

        let t0 = std::time::Instant::now();
        let mut wins = 0;
        let mut ties = 0;
        let mut gaps = Vec::new();
        let mut fp0s = Vec::new();
        for seed in 0..20u64 {
            let base = TrainConfig {
                epochs,
                seed,
                learning_rate: lr,
                n_candidates: n_cand,
                policy_init: PolicyInit::HallucinationProne { positive_bias: bias },
                ..Default::default()
            };
            let with_gamma = train(
                &ab_corpus,
                &ab_vocab,
                &ab_backends,
                &TrainConfig { gamma: 0.5, ..base.clone() },
            )
            .unwrap();
            let without =
                train(&ab_corpus, &ab_vocab, &ab_backends, &TrainConfig { gamma: 0.0, ..base })
                    .unwrap();
            let fp_with = with_gamma.history.last().unwrap().mean_l_fp;
            let fp_without = without.history.last().unwrap().mean_l_fp;
            if fp_with < fp_without {
                wins += 1;
            }
            if fp_with == fp_without {
                ties += 1;
            }
            gaps.push(fp_without - fp_with);
            fp0s.push(fp_without);
        }
        let mean_gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
        let mean_fp0 = fp0s.iter().sum::<f64>() / fp0s.len() as f64;
        println!(
            "studies={num_studies} N={n_cand} epochs={epochs} lr={lr} bias={bias} sigma={sigma}: \
             wins {wins}/20 (ties {ties}), mean gap {mean_gap:.5}, mean fp(g=0) {mean_fp0:.5}, {:?}",
            t0.elapsed()
        );
    }
}
