//! Whole-model gradients against central differences over every scalar of
//! every registered parameter.

use promptner::episode::{EntityTypeSet, TaggedSentence};
use promptner::training::{build_vocabulary, EncoderSpec, LossOptions, ModelConfig, PromptNer};

fn sentence(id: &str, text: &str, tags: &str) -> TaggedSentence {
    TaggedSentence::new(
        id,
        text.split_whitespace().map(String::from).collect(),
        tags.split_whitespace().map(String::from).collect(),
    )
    .unwrap()
}

fn check_model(two_encoders: bool, opts: LossOptions) {
    let support = vec![
        sentence("a", "alice met bob in paris", "person O person O city"),
        sentence("b", "rome is far", "city O O"),
    ];
    let types = EntityTypeSet::new(["person", "city"]).unwrap();
    let names: Vec<String> = types.entity_types().to_vec();
    let config = ModelConfig {
        encoder: EncoderSpec::Tiny { d: 8, layers: 1 },
        dropout: 0.0,
        two_encoders,
        biaffine_hidden: 4,
        max_positions: 32,
        ..ModelConfig::default()
    };
    let template = config.template.clone();
    let tok = build_vocabulary(&support, &names, &template, &[]).unwrap();
    let mut model = PromptNer::new(config, Some(tok), 3).unwrap();

    let sets: [&[TaggedSentence]; 1] = [&support];
    let (_, grads) = model.loss_and_grads(&sets, &types, 1, &opts, None).unwrap();
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    let mut worst_at = String::new();
    let mut checked = 0;
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let (rows, cols) = model.params.get(id).shape();
        for r in 0..rows {
            for c in 0..cols {
                let orig = model.params.get(id)[(r, c)];
                model.params.get_mut(id).row_mut(r)[c] = orig + eps;
                let plus = model.loss(&sets, &types, 1, &opts).unwrap().total;
                model.params.get_mut(id).row_mut(r)[c] = orig - eps;
                let minus = model.loss(&sets, &types, 1, &opts).unwrap().total;
                model.params.get_mut(id).row_mut(r)[c] = orig;
                let numeric = (plus - minus) / (2.0 * eps);
                let analytic = grads.get(&id).map_or(0.0, |g| g[(r, c)]);
                let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-4);
                if err > worst {
                    worst = err;
                    worst_at = format!(
                        "{}[{r},{c}]: numeric {numeric:e}, analytic {analytic:e}",
                        model.params.entry(id).name
                    );
                }
                checked += 1;
            }
        }
    }
    assert!(checked > 1000, "only {checked} scalars");
    assert!(
        worst <= 1e-3,
        "worst relative error {worst:e} at {worst_at}"
    );
}

#[test]
fn two_encoder_model_gradients_match_finite_differences() {
    check_model(
        true,
        LossOptions {
            negatives_in_class_loss: false,
            use_contrastive: true,
            contrastive_scale: None,
        },
    );
}

#[test]
fn shared_encoder_model_gradients_match_finite_differences() {
    check_model(
        false,
        LossOptions {
            negatives_in_class_loss: false,
            use_contrastive: false,
            contrastive_scale: None,
        },
    );
}
