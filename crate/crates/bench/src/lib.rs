//! Fixtures shared by the benchmarks.

use infocal::data::{generate, Instance, SyntheticSpec};
use infocal::predictor::TaskMode;
use infocal::training::{InfoCal, ModelDims, ModelSpec};
use infocal::ParamStore;

/// A toy-sized model and a handful of synthetic instances.
pub fn fixture(embed_dim: usize, hidden_dim: usize) -> (InfoCal, ParamStore, Vec<Instance>) {
    let spec = SyntheticSpec {
        train: 64,
        dev: 0,
        test: 0,
        ..SyntheticSpec::default()
    };
    let corpus = generate(&spec).expect("default spec is valid");
    let model = InfoCal::new(ModelSpec {
        dims: ModelDims {
            vocab_size: spec.vocab_size,
            embed_dim,
            hidden_dim,
            num_classes: spec.num_classes,
        },
        mode: TaskMode::Classification,
    });
    let store = model.init(0);
    (model, store, corpus.train)
}
