use gatectr::data::EncodedInstance;
use gatectr::gates::{GateConfig, Granularity, Sharing};
use gatectr::gradcheck::random_batch;
use gatectr::model::{Family, HiddenGateConfig, Model, ModelSpec};
use gatectr::tensor::{Activation, Rng};

fn spec(family: Family) -> ModelSpec {
    ModelSpec {
        embedding_dim: 6,
        hidden_widths: vec![16, 12, 8],
        ..ModelSpec::new(family, &[7, 3, 11, 5])
    }
}

fn one_gate(granularity: Granularity, sharing: Sharing) -> GateConfig {
    GateConfig {
        granularity,
        sharing,
        activation: Activation::One,
        ..GateConfig::default()
    }
}

fn logits(model: &Model, batch: &[EncodedInstance], dropout_seed: Option<u64>) -> Vec<u64> {
    let mut rng = dropout_seed.map(Rng::new);
    batch
        .iter()
        .map(|i| model.forward(&i.indices, rng.as_mut()).unwrap().logit.to_bits())
        .collect()
}

#[test]
fn constant_one_gates_reproduce_ungated_logits_bitwise() {
    for family in [Family::Fm, Family::Dnn, Family::DeepFm] {
        let base_spec = spec(family);
        let batch = random_batch(&base_spec.cardinalities(), 64, 21);
        let base = Model::new(base_spec.clone(), 1234).unwrap();
        let expected = logits(&base, &batch, None);
        let expected_dropout = logits(&base, &batch, Some(5));

        for g in [Granularity::VectorWise, Granularity::BitWise] {
            for s in [Sharing::FieldPrivate, Sharing::FieldShared] {
                for hidden in [false, true] {
                    if hidden && !family.has_deep() {
                        continue;
                    }
                    let mut gated = base_spec.clone();
                    gated.embed_gate = Some(one_gate(g, s));
                    gated.hidden_gate = hidden.then_some(HiddenGateConfig {
                        activation: Activation::One,
                        ..HiddenGateConfig::default()
                    });
                    let m = Model::new(gated, 1234).unwrap();
                    assert_eq!(logits(&m, &batch, None), expected, "{family:?} {g:?} {s:?} hidden={hidden}");
                    assert_eq!(logits(&m, &batch, Some(5)), expected_dropout);
                }
            }
        }
    }
}

#[test]
fn adding_a_gate_leaves_other_parameters_untouched() {
    let base = Model::new(spec(Family::DeepFm), 77).unwrap();
    let mut s = spec(Family::DeepFm);
    s.embed_gate = Some(GateConfig::default());
    s.hidden_gate = Some(HiddenGateConfig::default());
    let gated = Model::new(s, 77).unwrap();
    use gatectr::model::Parameterized;
    for (name, value, _) in base.params().iter() {
        assert_eq!(gated.params().get(name), Some(value), "{name}");
    }
}
