//! Shared fixtures for the benchmarks: an untrained backbone at the default
//! sizes is as costly to evaluate as a pretrained one.

use bridgeprompt::numerics::Tensor;
use bridgeprompt::prompts::encode;
use bridgeprompt::toyworld::{make_pairs, DegradationKind, PairedSample, DEFAULT_SIDE};
use bridgeprompt::{Backbone, BackboneConfig, Conditioner, ConditionerConfig, Prompt, VariantTag};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct Fixture {
    pub backbone: Backbone,
    pub conditioner: Conditioner,
    pub prompt: Prompt,
    pub context: Tensor,
    pub pairs: Vec<PairedSample>,
}

pub fn fixture() -> Fixture {
    let conditioner = Conditioner::new(ConditionerConfig::default()).expect("default conditioner");
    let mut backbone =
        Backbone::init(BackboneConfig::default(), conditioner.null_context().expect("null context")).expect("backbone");
    backbone.weights_mut().freeze();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let prompt = Prompt::initial(
        VariantTag::Embedding,
        DegradationKind::Veil,
        &conditioner,
        backbone.e_null(),
        &mut rng,
    )
    .expect("prompt");
    let context = encode(&prompt, &conditioner, backbone.e_null()).expect("context");
    let pairs = make_pairs(DegradationKind::Veil.default_degradation(), DEFAULT_SIDE, 8, 1).expect("pairs");
    Fixture {
        backbone,
        conditioner,
        prompt,
        context,
        pairs,
    }
}
