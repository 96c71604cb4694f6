use proptest::prelude::*;

use spnn::data::Dataset;
use spnn::lfsr::{LfsrConfig, LfsrMode};
use spnn::mask::{generate_mask, width_for_rows, MaskMatrix, SngConfig};
use spnn::quantize::{masked_weights, Phase, QuantMode};
use spnn::store::{compress_layer, decompress_layer, deserialize, memory_footprint_bits, serialize, ModelFile};
use spnn::train::{train_epoch, EvalMode, Network, TrainConfig};
use spnn::{Error, Matrix};

fn mask(n: usize, m: usize, p: f64, base: u32, mode: LfsrMode) -> MaskMatrix {
    let lfsr = LfsrConfig::standard(width_for_rows(n), 1, mode).unwrap();
    generate_mask(n, m, &SngConfig::from_sparsity(lfsr, p).unwrap(), base).unwrap()
}

fn quant_mode() -> impl Strategy<Value = QuantMode> {
    prop_oneof![Just(QuantMode::None), Just(QuantMode::Binary), Just(QuantMode::Ternary)]
}

fn trained(quant: QuantMode) -> (TrainConfig, Network) {
    let cfg = TrainConfig {
        shape: vec![16, 9, 7, 3],
        sparsity: vec![0.5, 0.75, 0.0],
        quant,
        batch_size: 5,
        learning_rate: 0.05,
        ..TrainConfig::default()
    };
    let x = Matrix::from_fn(30, 16, |i, j| ((i * 31 + j * 17) % 11) as f32 / 10.0);
    let data = Dataset::new(x, (0..30).map(|i| i % 3).collect()).unwrap();
    let mut net = Network::init(&cfg).unwrap();
    for epoch in 1..=2 {
        train_epoch(&mut net, &data, &cfg, epoch, cfg.learning_rate).unwrap();
    }
    (cfg, net)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn roundtrip_equals_quantize_then_mask(
        n in 1usize..80,
        m in 1usize..12,
        p in prop_oneof![Just(0.0), Just(0.5), Just(0.75), Just(0.875), Just(0.9375), 0.0f64..1.0],
        base in 1u32..1000,
        quant in quant_mode(),
        maximal in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mode = if maximal { LfsrMode::Maximal } else { LfsrMode::DeBruijn };
        let mk = mask(n, m, p, base, mode);
        let mut s = seed;
        let w = Matrix::from_fn(n, m, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 40) as f32 / (1u64 << 23) as f32 - 1.0
        });
        let c = compress_layer(&w, &mk, quant).unwrap();
        for j in 0..m {
            prop_assert_eq!(c.depth(j), mk.column_popcount(j).unwrap());
        }
        prop_assert_eq!(memory_footprint_bits(&c), mk.kept() as u64 * u64::from(quant.weight_width_bits()));
        let oracle = masked_weights(&w, &mk.to_matrix(), quant, Phase::TestQuantized).unwrap();
        let back = decompress_layer(&c).unwrap();
        let bits = |m: &Matrix<f32>| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&oracle));

        let model = ModelFile { layers: vec![c], config_hash: seed, epochs: 3 };
        let bytes = serialize(&model).unwrap();
        prop_assert_eq!(deserialize(&bytes).unwrap(), model);
    }
}

#[test]
fn trained_models_roundtrip_and_predict_identically() {
    for quant in [QuantMode::None, QuantMode::Binary, QuantMode::Ternary] {
        let (cfg, net) = trained(quant);
        let model = ModelFile::from_network(&net, cfg.hash(), 2).unwrap();
        let bytes = serialize(&model).unwrap();
        let loaded = deserialize(&bytes).unwrap();
        assert_eq!(loaded, model);
        assert_eq!(serialize(&loaded).unwrap(), bytes);

        let x = Matrix::from_fn(6, 16, |i, j| ((i + 2 * j) % 5) as f32 / 4.0);
        let restored = loaded.to_network().unwrap();
        let eval_mode = if quant == QuantMode::None { EvalMode::Real } else { EvalMode::Quantized };
        assert_eq!(
            restored.predict(&x, EvalMode::Real).unwrap(),
            net.predict(&x, eval_mode).unwrap(),
            "{quant}"
        );
    }
}

#[test]
fn every_single_byte_flip_is_rejected() {
    let (cfg, net) = trained(QuantMode::Ternary);
    let bytes = serialize(&ModelFile::from_network(&net, cfg.hash(), 2).unwrap()).unwrap();
    for pos in 0..bytes.len() {
        for flip in [0x01u8, 0x80, 0xff] {
            let mut bad = bytes.clone();
            bad[pos] ^= flip;
            let err = deserialize(&bad).expect_err(&format!("flip {flip:#x} at {pos} accepted"));
            assert!(err.is_data_error(), "byte {pos}: {err}");
        }
    }
}

#[test]
fn truncation_anywhere_is_a_format_error() {
    let (cfg, net) = trained(QuantMode::None);
    let bytes = serialize(&ModelFile::from_network(&net, cfg.hash(), 2).unwrap()).unwrap();
    for len in 0..bytes.len() {
        assert!(matches!(deserialize(&bytes[..len]), Err(Error::Format { .. })), "length {len}");
    }
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(deserialize(&long), Err(Error::Format { .. })));
}

#[test]
fn save_is_atomic_and_loadable() {
    let (cfg, net) = trained(QuantMode::Binary);
    let model = ModelFile::from_network(&net, cfg.hash(), 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.spnn");
    model.save(&path).unwrap();
    model.save(&path).unwrap();
    assert_eq!(ModelFile::load(&path).unwrap(), model);
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
}

#[test]
fn debruijn_depths_match_table() {
    for (p, depth) in [(0.0, 1024), (0.5, 512), (0.75, 256), (0.875, 128), (0.9375, 64)] {
        let mk = mask(1024, 8, p, 37, LfsrMode::DeBruijn);
        let c = compress_layer(&Matrix::filled(1024, 8, 0.3), &mk, QuantMode::Binary).unwrap();
        for j in 0..8 {
            assert_eq!(c.neuron_memory_bits(j), depth);
        }
    }
}
