use badiff::codec::{decode, encode, pmf_to_cdf, Bitstream, RangeDecoder, RangeEncoder};
use badiff::config::Config;
use badiff::entropy::{SymbolGrid, K};
use badiff::Model;
use proptest::prelude::*;

fn model() -> Model {
    let mut c = Config::default();
    let m = &mut c.model;
    m.image_size = 8;
    m.steps = 10;
    m.denoiser.levels = vec![4, 8];
    m.denoiser.blocks_per_level = 1;
    m.denoiser.time_embed_dim = 8;
    m.denoiser.entropy_embed_dim = 6;
    m.denoiser.groups = 2;
    m.denoiser.attention = vec![false, false];
    m.entropy.hyper_channels = 3;
    m.entropy.context_channels = 3;
    m.entropy.fusion_channels = 4;
    m.policy.hidden = vec![8, 4];
    Model::new(c.model).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn range_coder_round_trips(
        weights in prop::collection::vec(0.0f64..1.0, 2..80),
        picks in prop::collection::vec(any::<prop::sample::Index>(), 0..300),
    ) {
        let total: f64 = weights.iter().sum::<f64>() + 1e-9;
        let pmf: Vec<f64> = weights.iter().map(|w| (w + 1e-9 / weights.len() as f64) / total).collect();
        let cdf = pmf_to_cdf(&pmf).unwrap();
        let msg: Vec<usize> = picks.iter().map(|i| i.index(pmf.len())).collect();
        let mut enc = RangeEncoder::new();
        for &s in &msg {
            enc.encode(&cdf, s);
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes);
        for &s in &msg {
            prop_assert_eq!(dec.decode(&cdf).unwrap(), s);
        }
        let ideal: f64 = msg.iter().map(|&s| cdf.bits(s)).sum();
        prop_assert!((bytes.len() * 8) as f64 <= ideal * 1.01 + 64.0);
    }

    #[test]
    fn frozen_cdf_never_drops_a_symbol(weights in prop::collection::vec(0.0f64..1.0, 1..K + 1)) {
        let mut pmf = weights;
        pmf[0] += 1.0;
        let total: f64 = pmf.iter().sum();
        pmf.iter_mut().for_each(|p| *p /= total);
        let cdf = pmf_to_cdf(&pmf).unwrap();
        prop_assert_eq!(cdf.symbols(), pmf.len());
        for s in 0..pmf.len() {
            prop_assert!(cdf.freq(s) >= 1);
            prop_assert_eq!(cdf.find(cdf.start(s)), s);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn bitstream_round_trips(
        symbols in prop::collection::vec(0u8..K as u8, 64),
        bpp in 0.2f64..2.0,
    ) {
        let m = model();
        let grid = SymbolGrid::new(8, 8, symbols).unwrap();
        let bs = encode(&grid, &m.entropy, &m.params, &m.budget(bpp).unwrap()).unwrap();
        let bytes = bs.to_bytes();
        let back = Bitstream::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(decode(&back, &m.entropy, &m.params).unwrap(), grid);
    }
}

#[test]
fn odd_sizes_are_refused() {
    let m = model();
    let grid = SymbolGrid::new(6, 8, vec![0; 48]).unwrap();
    assert!(encode(&grid, &m.entropy, &m.params, &m.budget(1.0).unwrap()).is_err());
}
