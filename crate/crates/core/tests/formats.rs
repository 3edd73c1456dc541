use blockquant::formats::{
    decode, encode_nearest, enumerate_values, max_finite, BitPattern, FloatSpec, Rounding,
};
use proptest::prelude::*;

fn spec() -> impl Strategy<Value = FloatSpec> {
    (1u32..=5, 0u32..=4, any::<bool>(), -4i32..=8).prop_filter_map(
        "valid spec",
        |(e, m, implicit, db)| {
            let bias = blockquant::formats::default_bias(e) + db - 2;
            FloatSpec::new(e, m, bias, implicit, true).ok()
        },
    )
}

/// Distance from `x` to the closest finite value of the spec, by brute force.
fn best_distance(x: f64, spec: &FloatSpec) -> f64 {
    enumerate_values(spec)
        .unwrap()
        .iter()
        .map(|g| (g.value - x).abs())
        .fold(f64::INFINITY, f64::min)
}

proptest! {
    #[test]
    fn encode_picks_a_nearest_value(spec in spec(), x in -1e3f64..1e3, away in any::<bool>()) {
        let rounding = if away { Rounding::NearestTiesAway } else { Rounding::NearestTiesToEven };
        let p = encode_nearest(x, &spec, rounding).unwrap();
        prop_assert!(spec.is_finite_pattern(p));
        prop_assert_eq!((decode(p, &spec) - x).abs(), best_distance(x, &spec));
    }

    #[test]
    fn encode_is_monotone_and_odd(spec in spec(), a in -500f64..500.0, b in -500f64..500.0) {
        let r = Rounding::NearestTiesToEven;
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let vl = decode(encode_nearest(lo, &spec, r).unwrap(), &spec);
        let vh = decode(encode_nearest(hi, &spec, r).unwrap(), &spec);
        prop_assert!(vl <= vh);
        let neg = decode(encode_nearest(-a, &spec, r).unwrap(), &spec);
        prop_assert_eq!(neg, -decode(encode_nearest(a, &spec, r).unwrap(), &spec));
    }

    #[test]
    fn saturates_at_max_finite(spec in spec(), k in 1f64..1e6) {
        let top = max_finite(&spec);
        let p = encode_nearest(top * (1.0 + k), &spec, Rounding::NearestTiesToEven).unwrap();
        prop_assert_eq!(decode(p, &spec), top);
    }

    #[test]
    fn bits_round_trip(spec in spec(), bits in any::<u32>()) {
        let bits = bits & ((1u32 << spec.width()) - 1);
        let p = BitPattern::from_bits(bits, &spec).unwrap();
        prop_assert_eq!(p.to_bits(&spec), bits);
    }
}

#[test]
fn negative_zero_is_canonical() {
    let s = FloatSpec::minifloat(4, 3).unwrap();
    let p = encode_nearest(-0.0, &s, Rounding::NearestTiesToEven).unwrap();
    assert_eq!(p, BitPattern::ZERO);
    assert!(encode_nearest(f64::NAN, &s, Rounding::NearestTiesToEven).is_err());
}
