//! Writes the seed corpus for the fuzz targets (run from the repo root:
//! `cargo run -p scaledrop --example generate_fuzz_corpus`).

use scaledrop::checkpoint::checkpoint_bytes;
use scaledrop::data::{save_idx_dataset, synth_digits};
use scaledrop::dropout::{DropoutConfig, DropoutVariant};
use scaledrop::model::{LayerSpec, Model, ModelSpec};
use std::fs;
use std::path::Path;

fn main() {
    let corpus = Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../fuzz/corpus"));

    // IDX seeds: a tiny real image/label pair.
    let ds = synth_digits(4, 3);
    save_idx_dataset(
        &ds,
        &corpus.join("fuzz_idx_images/digits4.idx"),
        &corpus.join("fuzz_idx_labels/digits4-labels.idx"),
    )
    .unwrap();

    // Checkpoint seeds: a small conv model and a linear model.
    let conv_spec = ModelSpec {
        input: vec![6, 6, 1],
        layers: vec![
            LayerSpec::BinaryConv { c_out: 2, kernel: 3, stride: 1, padding: 1 },
            LayerSpec::BatchNorm,
            LayerSpec::Sign,
            LayerSpec::Flatten,
            LayerSpec::BinaryLinear { out_features: 3 },
        ],
    };
    let model = Model::build(&conv_spec, 5).unwrap();
    let cfg = DropoutConfig::new(DropoutVariant::Unitary, vec![0.5, 0.2]).unwrap();
    fs::write(
        corpus.join("fuzz_checkpoint/conv-with-proxy.sdcp"),
        checkpoint_bytes(&model, &cfg, Some("seed".into()), true).unwrap(),
    )
    .unwrap();
    let lin_spec = ModelSpec {
        input: vec![8],
        layers: vec![LayerSpec::BinaryLinear { out_features: 2 }],
    };
    let lin = Model::build(&lin_spec, 1).unwrap();
    let lcfg = DropoutConfig::new(DropoutVariant::Average, vec![0.3]).unwrap();
    fs::write(
        corpus.join("fuzz_checkpoint/linear-frozen.sdcp"),
        checkpoint_bytes(&lin, &lcfg, None, false).unwrap(),
    )
    .unwrap();

    // Config seeds.
    fs::write(
        corpus.join("fuzz_config/two-moons.toml"),
        r#"[experiment]
seed = 42
out_dir = "runs/demo"

[model]
input = [32]
layers = [
  { kind = "binary-linear", out_features = 16 },
  { kind = "batch-norm" },
  { kind = "sign" },
  { kind = "binary-linear", out_features = 2 },
]

[training]
learning_rate = 0.01
epochs = 5
batch_size = 16

[dataset]
kind = "two-moons"
n_train = 64
n_test = 32
"#,
    )
    .unwrap();
    fs::write(
        corpus.join("fuzz_config/lenet.toml"),
        r#"[experiment]
seed = 1
out_dir = "runs/lenet"
t_passes = 10

[model]
input = [28, 28, 1]
layers = [
  { kind = "binary-conv", c_out = 6, kernel = 5 },
  { kind = "batch-norm" },
  { kind = "sign" },
  { kind = "max-pool", size = 2 },
  { kind = "flatten" },
  { kind = "binary-linear", out_features = 10 },
]

[training]
learning_rate = 0.01
epochs = 2
batch_size = 32

[dataset]
kind = "synth-digits"
n_train = 100
n_test = 50

[crossbar]
strategy = "kxk-split"
adc_bits = 9

[ood]
sets = ["gaussian-noise", "uniform-noise", "rotate"]
rotate_degrees = 45.0
"#,
    )
    .unwrap();

    // CSV seeds.
    fs::write(
        corpus.join("fuzz_csv/vectors.csv"),
        "0.25,-1.5,3.75,0\n1.0,2.0,-0.125,1\n# comment line\n0.5,0.5,0.5,2\n",
    )
    .unwrap();
    fs::write(
        corpus.join("fuzz_csv/single.csv"),
        "1e-3,4\n-2.5e2,1\n",
    )
    .unwrap();
    println!("corpus written");
}
