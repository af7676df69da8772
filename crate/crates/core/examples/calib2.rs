use radgear_core::backends::Backends;
use radgear_core::corpus::{generate_synthetic_corpus, SyntheticCorpusConfig};
use radgear_core::grounding::SyntheticGrounderConfig;
use radgear_core::labeler::DiseaseVocabulary;
use radgear_core::policy::{reinforce_step, PolicyInit, TrainConfig, TrainState};

fn main() {
    let vocab = DiseaseVocabulary::new(vec![
        "Cardiomegaly".into(),
        "Edema".into(),
        "Pneumonia".into(),
        "Pleural Effusion".into(),
    ])
    .unwrap();
    let corpus = generate_synthetic_corpus(
        &SyntheticCorpusConfig {
            seed: 99,
            num_studies: 6,
            k: 4,
            positive_rate: 0.5,
            noise_rate: 0.2,
            num_candidates: 1,
            ..Default::default()
        },
        &vocab,
    )
    .unwrap();
    let backends =
        Backends::deterministic(SyntheticGrounderConfig { blob_sigma: 4.0, ..Default::default() })
            .unwrap();

    for gamma in [0.5, 0.0] {
        let cfg = TrainConfig {
            epochs: 1,
            seed: 0,
            learning_rate: 1.0,
            n_candidates: 1,
            gamma,
            policy_init: PolicyInit::HallucinationProne { positive_bias: 2.0 },
            ..Default::default()
        };
        let mut state = TrainState::new(&vocab, &cfg).unwrap();
        println!("--- gamma {gamma} ---");
        for s in &corpus {
            let stats = reinforce_step(&mut state, s, &vocab, &backends, &cfg).unwrap();
            println!(
                "{}: reward {:.5} adv {:.5} l_tp {:.5} l_fn {:.5} l_fp {:.5}",
                s.study_id,
                stats.reward,
                stats.advantage,
                stats.breakdown.l_tp,
                stats.breakdown.l_fn,
                stats.breakdown.l_fp
            );
        }
        let block = state.policy.context_logits("synth-0000").unwrap();
        println!("logits[0..9] = {:?}", &block[0..9]);
    }
}
