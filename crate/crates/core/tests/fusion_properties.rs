use fedloc_core::federation::{self, BetaRule, FusionShare, LocalPacket};
use fedloc_core::filter::{self, KfModel, StateEstimate};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let l = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &l * l.transpose() + DMatrix::identity(n, n) * 0.1
}

fn random_packets(rng: &mut ChaCha8Rng, count: usize, n: usize) -> Vec<LocalPacket> {
    (0..count)
        .map(|i| LocalPacket {
            filter_id: i as u32 + 1,
            x: DVector::from_fn(n, |_, _| rng.random_range(-80.0..-40.0)),
            p: random_spd(rng, n),
            k: 3,
        })
        .collect()
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

#[test]
fn fused_information_is_the_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..300 {
        let n = 1 + trial % 2;
        let count = rng.random_range(1..=6);
        let packets = random_packets(&mut rng, count, n);
        let master = (trial % 3 == 0).then(|| {
            StateEstimate::new(DVector::from_element(n, -60.0), random_spd(&mut rng, n), 3).unwrap()
        });
        let fused = federation::fuse(&packets, master.as_ref()).unwrap();
        let mut info = DMatrix::zeros(n, n);
        for p in &packets {
            info += p.p.clone().try_inverse().unwrap();
        }
        if let Some(m) = &master {
            info += m.p.clone().try_inverse().unwrap();
        }
        let fused_info = fused.p.clone().try_inverse().unwrap();
        assert!(max_abs(&(fused_info - info)) <= 1e-9);
    }
}

#[test]
fn scalar_fusion_is_a_convex_combination() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..300 {
        let count = rng.random_range(1..=6);
        let packets = random_packets(&mut rng, count, 1);
        let fused = federation::fuse(&packets, None).unwrap();
        let lo = packets.iter().map(|p| p.x[0]).fold(f64::INFINITY, f64::min);
        let hi = packets
            .iter()
            .map(|p| p.x[0])
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(fused.x[0] >= lo - 1e-9 && fused.x[0] <= hi + 1e-9);
        let smallest = packets
            .iter()
            .map(|p| p.p[(0, 0)])
            .fold(f64::INFINITY, f64::min);
        assert!(fused.p[(0, 0)] <= smallest + 1e-12);
    }
}

#[test]
fn fusion_ignores_packet_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..100 {
        let mut packets = random_packets(&mut rng, 5, 2);
        let a = federation::fuse(&packets, None).unwrap();
        packets.shuffle(&mut rng);
        let b = federation::fuse(&packets, None).unwrap();
        assert!((a.x - b.x).amax() <= 1e-9);
        assert!((a.p - b.p).amax() <= 1e-12);
    }
}

#[test]
fn share_then_fuse_restores_the_global_estimate() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for count in 1..=6 {
        let betas = BetaRule::EQUAL.weights(count, None).unwrap();
        let share = FusionShare {
            x_f: DVector::from_element(2, -61.0),
            p_f: random_spd(&mut rng, 2),
            betas,
            q_global: DMatrix::identity(2, 2),
            k: 0,
        };
        let inits = federation::share(&share).unwrap();
        let packets: Vec<LocalPacket> = inits
            .iter()
            .enumerate()
            .map(|(i, init)| LocalPacket {
                filter_id: i as u32 + 1,
                x: init.x.clone(),
                p: init.p.clone(),
                k: 0,
            })
            .collect();
        let fused = federation::fuse(&packets, None).unwrap();
        assert!((fused.x - &share.x_f).amax() <= 1e-9);
        assert!((fused.p - &share.p_f).amax() <= 1e-9);
    }
}

#[test]
fn single_filter_round_is_a_plain_kalman_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let model = KfModel::scalar(1.0, 1.0, 0.8, 4.0);
    let mut kf = StateEstimate::scalar(0.0, 100.0, 0);
    let mut share = FusionShare {
        x_f: kf.x.clone(),
        p_f: kf.p.clone(),
        betas: vec![1.0],
        q_global: model.q.clone(),
        k: 0,
    };
    for _ in 0..500 {
        let z = DVector::from_element(1, rng.random_range(-70.0..-50.0));
        kf = filter::step(&kf, &model, &z).unwrap();
        share = federation::fkf_round(&[z], &share, std::slice::from_ref(&model), None)
            .unwrap()
            .share;
        assert_eq!(share.x_f[0], kf.x[0]);
        assert_eq!(share.p_f[(0, 0)], kf.p[(0, 0)]);
        assert_eq!(share.k, kf.k);
    }
}

#[test]
fn invalid_weights_are_rejected() {
    assert!(federation::validate_betas(&[0.5, 0.6]).is_err());
    assert!(federation::validate_betas(&[1.5, -0.5]).is_err());
    assert!(federation::validate_betas(&[]).is_err());
    assert!(federation::validate_betas(&[0.25; 4]).is_ok());
    assert!(federation::fuse(&[], None).is_err());
}

#[test]
fn adaptive_weights_favor_confident_filters() {
    let packets = vec![
        LocalPacket {
            filter_id: 1,
            x: DVector::from_element(1, -60.0),
            p: DMatrix::from_element(1, 1, 1.0),
            k: 1,
        },
        LocalPacket {
            filter_id: 2,
            x: DVector::from_element(1, -60.0),
            p: DMatrix::from_element(1, 1, 3.0),
            k: 1,
        },
    ];
    let w = BetaRule::ADAPTIVE.weights(2, Some(&packets)).unwrap();
    assert!((w[0] - 0.75).abs() < 1e-12 && (w[1] - 0.25).abs() < 1e-12);
    assert_eq!(BetaRule::ADAPTIVE.weights(2, None).unwrap(), vec![0.5, 0.5]);
}
