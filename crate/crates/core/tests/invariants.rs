use num_complex::Complex64;
use proptest::prelude::*;

use acoustic_fusion_core::audio::{read_wav, write_wav, AudioClip, WavEncoding};
use acoustic_fusion_core::clustering::{region_boundaries, AngularRegion, MixtureState};
use acoustic_fusion_core::dprtf::{CtfLayout, DpRtfFeature};
use acoustic_fusion_core::fusion::{invalidate_depth, partition_features, region_to_rectangle, CameraModel, Keypoint, ObstacleMask};
use acoustic_fusion_core::geometry::{angular_distance_deg, compute_steering_table, wrap_degrees, ArrayGeometry, CandidateGrid};
use acoustic_fusion_core::image::DepthImage;
use acoustic_fusion_core::stft::{overlap_add, stft_stream, StreamingStft};

fn clip_strategy(max_channels: usize, min_len: usize, max_len: usize) -> impl Strategy<Value = AudioClip> {
    (1..=max_channels, min_len..=max_len).prop_flat_map(|(c, n)| {
        proptest::collection::vec(proptest::collection::vec(-1.0f32..1.0, n), c)
            .prop_map(|channels| AudioClip::new(channels, 16000).unwrap())
    })
}

proptest! {
    #[test]
    fn wrapped_angles_stay_in_half_open_range(deg in -5000.0f64..5000.0) {
        let w = wrap_degrees(deg);
        prop_assert!(w > -180.0 && w <= 180.0);
        let turns = (deg - w) / 360.0;
        prop_assert!((turns - turns.round()).abs() < 1e-9);
    }

    #[test]
    fn angular_distance_is_a_metric(a in -720.0f64..720.0, b in -720.0f64..720.0, c in -720.0f64..720.0) {
        let ab = angular_distance_deg(a, b);
        prop_assert!((0.0..=180.0).contains(&ab));
        prop_assert!((ab - angular_distance_deg(b, a)).abs() < 1e-9);
        prop_assert!(ab <= angular_distance_deg(a, c) + angular_distance_deg(c, b) + 1e-9);
    }

    #[test]
    fn streaming_stft_matches_batch_for_any_chunking(
        clip in clip_strategy(3, 256, 1500),
        chunks in proptest::collection::vec(1usize..400, 1..20),
    ) {
        let batch: Vec<_> = stft_stream(&clip, 256, 128).unwrap().collect();
        let mut stream = StreamingStft::new(clip.num_channels(), 256, 128).unwrap();
        let interleaved = clip.interleaved();
        let mut out = Vec::new();
        let mut pos = 0;
        let mut i = 0;
        while pos < clip.len() {
            let n = chunks[i % chunks.len()].min(clip.len() - pos);
            let c = clip.num_channels();
            stream.push_interleaved(&interleaved[pos * c..(pos + n) * c], &mut out);
            pos += n;
            i += 1;
        }
        prop_assert_eq!(out, batch);
    }

    #[test]
    fn overlap_add_inverts_analysis_inside_coverage(samples in proptest::collection::vec(-1.0f32..1.0, 256..2000)) {
        let clip = AudioClip::new(vec![samples.clone()], 16000).unwrap();
        let spectra: Vec<Vec<Complex64>> = stft_stream(&clip, 256, 128)
            .unwrap()
            .map(|f| (0..f.bins()).map(|k| f.get(0, k)).collect())
            .collect();
        let out = overlap_add(&spectra, 256, 128, samples.len());
        // The first and last half-window only see one window's tail.
        let covered = spectra.len() * 128;
        for t in 128..covered.min(samples.len()) {
            prop_assert!((out[t] - samples[t] as f64).abs() < 1e-5, "t={} {} vs {}", t, out[t], samples[t]);
        }
    }

    #[test]
    fn region_sides_are_strictly_decreasing_and_above_threshold(
        weights in proptest::collection::vec(0.0f64..1.0, 2..90),
        peak_seed in any::<usize>(),
        delta in 0.0f64..1.0,
    ) {
        let d = weights.len();
        let peak = peak_seed % d;
        let r = region_boundaries(&weights, peak, delta);
        prop_assert!(r.left_steps <= d / 2 && r.right_steps <= d / 2);
        prop_assert_eq!(r.b_left, (peak + d - r.left_steps) % d);
        prop_assert_eq!(r.b_right, (peak + r.right_steps) % d);
        for (steps, dir) in [(r.left_steps, d - 1), (r.right_steps, 1)] {
            let mut prev = weights[peak];
            for s in 1..=steps {
                let w = weights[(peak + s * dir) % d];
                prop_assert!(w < prev && w >= delta * weights[peak]);
                prev = w;
            }
        }
    }

    #[test]
    fn ctf_reduced_index_is_a_bijection(channels in 2usize..6, taps in 1usize..10, reference_seed in any::<usize>()) {
        let reference = reference_seed % channels;
        let layout = CtfLayout::new(channels, taps, reference).unwrap();
        let mut seen = vec![false; channels * taps - 1];
        for m in 0..channels {
            for q in 0..taps {
                match layout.reduced_index(m, q) {
                    None => prop_assert!(m == reference && q == 0),
                    Some(i) => {
                        prop_assert!(!seen[i]);
                        seen[i] = true;
                    }
                }
            }
        }
        prop_assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn pixels_survive_back_projection(u in 0.0f64..640.0, v in 0.0f64..480.0, depth in 0.1f64..10.0) {
        let cam = CameraModel::nominal(525.0, 520.0, 319.5, 239.5, 640, 480);
        let (pu, pv) = cam.project(&cam.back_project(u, v, depth)).unwrap();
        prop_assert!((pu - u).abs() < 1e-9 && (pv - v).abs() < 1e-9);
    }

    #[test]
    fn column_is_monotone_in_camera_angle(a in -80.0f64..80.0, b in -80.0f64..80.0) {
        let cam = CameraModel::nominal(500.0, 500.0, 320.0, 240.0, 640, 480);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(cam.column_for_camera_angle(lo).column <= cam.column_for_camera_angle(hi).column);
        let c = cam.column_for_camera_angle(a).column;
        prop_assert!((0.0..=639.0).contains(&c));
    }

    #[test]
    fn masks_partition_keypoints_and_depth(
        regions in proptest::collection::vec((-180.0f64..180.0, 0.0f64..60.0, 0.0f64..60.0), 0..4),
        points in proptest::collection::vec((0.0f64..64.0, 0.0f64..48.0), 0..100),
    ) {
        let cam = CameraModel::nominal(40.0, 40.0, 31.5, 23.5, 64, 48);
        let rects = regions
            .iter()
            .map(|&(c, l, h)| region_to_rectangle(&AngularRegion { center_deg: c, low_deg: c - l, high_deg: c + h }, &cam))
            .collect();
        let mask = ObstacleMask::new(0, 64, 48, rects);
        let keypoints: Vec<Keypoint> = points.iter().map(|&(u, v)| Keypoint { u, v, score: None }).collect();
        let (kept, rejected) = partition_features(&keypoints, &mask);
        prop_assert_eq!(kept.len() + rejected.len(), keypoints.len());
        prop_assert!(kept.iter().all(|k| !mask.blocks(k.u, k.v)));
        prop_assert!(rejected.iter().all(|k| mask.blocks(k.u, k.v)));

        let depth = DepthImage::filled(64, 48, 2.5);
        let cleared = invalidate_depth(&depth, &mask).unwrap();
        let zeros = cleared.data().iter().filter(|&&d| d == 0.0).count();
        prop_assert_eq!(zeros, mask.invalid_count());
        for row in 0..48 {
            for col in 0..64 {
                prop_assert_eq!(mask.is_valid(col, row), !mask.blocks(col as f64, row as f64));
            }
        }
    }

    #[test]
    fn float_wav_round_trip_is_exact(clip in clip_strategy(4, 0, 300)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        write_wav(&path, &clip, WavEncoding::Float32).unwrap();
        let back = read_wav(&path, Some(clip.num_channels())).unwrap();
        prop_assert_eq!(back.channels(), clip.channels());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn recursive_weights_stay_on_simplex(
        picks in proptest::collection::vec(proptest::collection::vec((1usize..129, 0usize..72, -1.0f64..1.0), 0..8), 1..50),
        smoothing in 0.01f64..1.0,
    ) {
        let geom = ArrayGeometry::default_profile();
        let table = compute_steering_table(&geom, &CandidateGrid::default(), 129, 16000.0).unwrap();
        let mut state = MixtureState::new(table.directions(), 0.5, smoothing);
        for frame in &picks {
            let features: Vec<DpRtfFeature> = frame
                .iter()
                .map(|&(bin, d, noise)| DpRtfFeature {
                    frame: 0,
                    bin,
                    values: table.means(bin, d).iter().map(|&c| c + Complex64::new(noise, -noise)).collect(),
                    residual: 0.0,
                    reliable: true,
                })
                .collect();
            state.update(&features, &table);
            let w = state.weights();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(w.iter().all(|&x| x >= 0.0 && x.is_finite()));
        }
    }
}
