use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sqdm::tensorkit::{
    addr_activation, addr_weight, bitmap_bytes, compress_channel, decompress_channel, ActivationDims,
    CompressedChannel, WeightDims,
};

#[test]
fn thousand_random_channels_roundtrip() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let n: usize = rng.random_range(0..300);
        let density = rng.random_range(0.0..=1.0);
        let x: Vec<f32> = (0..n)
            .map(|_| {
                if rng.random_bool(density) {
                    rng.random_range(-3.0..3.0)
                } else {
                    0.0
                }
            })
            .collect();
        let cc = compress_channel(&x);
        assert_eq!(cc.nnz(), x.iter().filter(|v| **v != 0.0).count());
        assert_eq!(cc.bitmap().len(), n.div_ceil(8));
        assert_eq!(decompress_channel(&cc, n).unwrap(), x);
        let rebuilt = CompressedChannel::from_parts(n, cc.bitmap().to_vec(), cc.values().to_vec()).unwrap();
        assert_eq!(rebuilt, cc);
    }
}

#[test]
fn integer_codes_roundtrip() {
    let x = [0i32, -7, 0, 0, 3, 0, 0, 0, 0, 1];
    let cc = compress_channel(&x);
    assert_eq!(cc.bitmap(), &[0b0001_0010, 0b0000_0010]);
    assert_eq!(cc.values(), &[-7, 3, 1]);
    assert_eq!(decompress_channel(&cc, 10).unwrap(), x);
    assert!(decompress_channel(&cc, 9).is_err());
}

#[test]
fn malformed_parts_rejected() {
    // popcount 1 but two values
    assert!(CompressedChannel::from_parts(8, vec![0b1], vec![1.0f32, 2.0]).is_err());
    // bit set beyond the channel length
    assert!(CompressedChannel::from_parts(3, vec![0b1000], vec![1.0f32]).is_err());
    // wrong bitmap size
    assert!(CompressedChannel::<f32>::from_parts(9, vec![0], vec![]).is_err());
    assert_eq!(bitmap_bytes(0), 0);
    assert_eq!(bitmap_bytes(17), 3);
}

#[test]
fn addressing_is_a_bijection_with_contiguous_channels() {
    let a = ActivationDims::new(5, 3, 7);
    let mut seen = HashSet::new();
    for c in 0..5 {
        for h in 0..3 {
            for w in 0..7 {
                let i = addr_activation(c, h, w, a).unwrap();
                assert!(i < a.len() && seen.insert(i));
                assert_eq!(i / a.channel_len(), c);
            }
        }
    }
    assert_eq!(seen.len(), a.len());
    assert!(addr_activation(5, 0, 0, a).is_err());

    let wd = WeightDims::new(3, 4, 3, 2);
    let mut seen = HashSet::new();
    for c in 0..3 {
        for k in 0..4 {
            for r in 0..3 {
                for s in 0..2 {
                    let i = addr_weight(c, k, r, s, wd).unwrap();
                    assert!(seen.insert(i));
                    assert_eq!(i / wd.channel_len(), c);
                }
            }
        }
    }
    assert_eq!(seen.len(), wd.len());
    assert!(addr_weight(0, 0, 3, 0, wd).is_err());
}
