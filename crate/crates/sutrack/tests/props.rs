//! Property tests for structural invariants.

use proptest::prelude::*;

use sutrack::config::RunConfig;
use sutrack::data::container::{read_sequence, write_sequence};
use sutrack::data::gen::{generate, GenDescriptor, TargetShape};
use sutrack::embed::{box_mask, soft_mask_avg, Task};
use sutrack::geom::PixelBox;
use sutrack::loss::{focal_target, giou};
use sutrack::tape::Tape;
use sutrack::tensor::Tensor;
use sutrack::tracker::{effective_window, parse_result_line, result_line, CropTransform};

fn any_box() -> impl Strategy<Value = PixelBox> {
    (
        -10.0f64..90.0,
        -10.0f64..90.0,
        0.5f64..40.0,
        0.5f64..40.0,
    )
        .prop_map(|(x0, y0, w, h)| PixelBox::new(x0, y0, x0 + w, y0 + h))
}

fn box_var<'t>(tape: &'t Tape, b: &PixelBox) -> sutrack::tape::Var<'t> {
    tape.constant(Tensor::new(vec![4], vec![b.x0, b.y0, b.x1, b.y1]))
}

fn plain_iou(a: &PixelBox, b: &PixelBox) -> f64 {
    let ix = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let iy = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = ix * iy;
    let union = a.width() * a.height() + b.width() * b.height() - inter;
    inter / union
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        vals in proptest::collection::vec(-15.0f64..15.0, 12)
    ) {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3, 4], vals));
        let y = x.softmax_last();
        for row in 0..3 {
            let mut sum = 0.0;
            for col in 0..4 {
                let v = y.value().at(&[row, col]);
                prop_assert!(v > 0.0 && v < 1.0);
                sum += v;
            }
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn giou_is_bounded_symmetric_and_below_iou(a in any_box(), b in any_box()) {
        let tape = Tape::new();
        let ab = giou(&tape, box_var(&tape, &a), box_var(&tape, &b)).unwrap().item();
        let ba = giou(&tape, box_var(&tape, &b), box_var(&tape, &a)).unwrap().item();
        prop_assert!((-1.0..=1.0).contains(&ab));
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab <= plain_iou(&a, &b) + 1e-12);
    }

    #[test]
    fn giou_of_identical_boxes_is_one(a in any_box()) {
        let tape = Tape::new();
        let v = giou(&tape, box_var(&tape, &a), box_var(&tape, &a)).unwrap().item();
        prop_assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clamped_boxes_stay_inside(a in any_box(), w in 1usize..200, h in 1usize..200) {
        let c = a.clamp_to(w, h);
        prop_assert!(c.x0 >= 0.0 && c.y0 >= 0.0);
        prop_assert!(c.x1 <= w as f64 && c.y1 <= h as f64);
        prop_assert!(c.x0 <= c.x1 && c.y0 <= c.y1);
    }

    #[test]
    fn crop_transform_roundtrips_boxes(
        a in any_box(),
        cx in -20.0f64..120.0,
        cy in -20.0f64..120.0,
        side in 8.0f64..256.0,
    ) {
        let t = CropTransform { cx, cy, side, out_res: 64 };
        let back = t.box_to_frame(&t.box_to_crop(&a));
        prop_assert!((back.x0 - a.x0).abs() < 1e-9);
        prop_assert!((back.y0 - a.y0).abs() < 1e-9);
        prop_assert!((back.x1 - a.x1).abs() < 1e-9);
        prop_assert!((back.y1 - a.y1).abs() < 1e-9);
    }

    #[test]
    fn result_lines_roundtrip(
        idx in 0usize..100_000,
        a in any_box(),
        conf in 0.0f64..1.0,
    ) {
        let line = result_line(idx, &a, conf);
        let (i, b, c) = parse_result_line(line.trim_end()).unwrap();
        prop_assert_eq!(i, idx);
        prop_assert_eq!(a.x0.to_bits(), b.x0.to_bits());
        prop_assert_eq!(a.y0.to_bits(), b.y0.to_bits());
        prop_assert_eq!(a.x1.to_bits(), b.x1.to_bits());
        prop_assert_eq!(a.y1.to_bits(), b.y1.to_bits());
        prop_assert_eq!(conf.to_bits(), c.to_bits());
    }

    #[test]
    fn mask_averages_lie_in_unit_interval_and_grow_with_the_box(
        a in any_box(),
        pad in 0.5f64..10.0,
    ) {
        let m_small = soft_mask_avg(&box_mask(&a, 32, 32), 8).unwrap();
        let bigger = PixelBox::new(a.x0 - pad, a.y0 - pad, a.x1 + pad, a.y1 + pad);
        let m_big = soft_mask_avg(&box_mask(&bigger, 32, 32), 8).unwrap();
        for (s, b) in m_small.iter().zip(&m_big) {
            prop_assert!((0.0..=1.0).contains(s));
            prop_assert!(s <= b);
        }
    }

    #[test]
    fn effective_window_is_a_bounded_symmetric_bump(
        side in 3usize..24,
        weight in 0.0f64..1.0,
    ) {
        let w = effective_window(side, weight).unwrap();
        let mut max = f64::NEG_INFINITY;
        for i in 0..side {
            for j in 0..side {
                let v = w.at(&[i, j]);
                prop_assert!(v >= 1.0 - weight - 1e-12 && v <= 1.0 + 1e-12);
                prop_assert!((v - w.at(&[j, i])).abs() < 1e-12);
                prop_assert!((v - w.at(&[side - 1 - i, side - 1 - j])).abs() < 1e-12);
                max = max.max(v);
            }
        }
        // Odd sides sample the exact peak of the underlying window.
        if side % 2 == 1 {
            prop_assert!((max - 1.0).abs() < 1e-12);
        } else {
            prop_assert!((max - w.at(&[side / 2, side / 2])).abs() < 1e-12);
        }
    }

    #[test]
    fn focal_targets_have_exactly_one_peak(
        cx in 1.0f64..63.0,
        cy in 1.0f64..63.0,
        w in 0.5f64..30.0,
        h in 0.5f64..30.0,
    ) {
        let gt = PixelBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0);
        let t = focal_target(&gt, 4, 16).unwrap();
        let ones = t.data().iter().filter(|&&v| v == 1.0).count();
        prop_assert_eq!(ones, 1);
        for &v in t.data() {
            prop_assert!(v > 0.0 && v <= 1.0);
        }
    }

    #[test]
    fn config_overrides_roundtrip_through_json(
        steps in 1usize..10_000,
        dim in 1usize..256,
        wd in 0.0f64..1.0,
    ) {
        let mut cfg = RunConfig::default();
        cfg.apply_set(&format!("steps={steps}")).unwrap();
        cfg.apply_set(&format!("dim={dim}")).unwrap();
        cfg.apply_set(&format!("weight_decay={wd}")).unwrap();
        let back: RunConfig =
            serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn sequences_roundtrip_through_the_container(
        seed in 0u64..1000,
        task_ix in 0usize..5,
        camo in proptest::bool::ANY,
    ) {
        let desc = GenDescriptor {
            task: Task::ALL[task_ix],
            frame_size: 24,
            target_size: 6,
            shape: TargetShape::Disc,
            color_index: seed as usize % 7,
            velocity: (0.7, -0.3),
            distractors: 1,
            camouflage: camo,
        };
        let seq = generate(&desc, seed, 3);
        let dir = tempfile::tempdir().unwrap();
        write_sequence(dir.path(), &seq).unwrap();
        let back = read_sequence(dir.path()).unwrap();
        prop_assert_eq!(back.task, seq.task);
        prop_assert_eq!(&back.language, &seq.language);
        prop_assert_eq!(back.boxes.len(), seq.boxes.len());
        for (x, y) in back.boxes.iter().zip(&seq.boxes) {
            prop_assert_eq!(x, y);
        }
        for (f, g) in back.frames.iter().zip(&seq.frames) {
            prop_assert_eq!(f.task, g.task);
            prop_assert_eq!(&f.language, &g.language);
            prop_assert!(f.rgb.data() == g.rgb.data(), "rgb planes differ");
            match (&f.aux, &g.aux) {
                (None, None) => {}
                (Some(x), Some(y)) => prop_assert!(x.data() == y.data(), "aux planes differ"),
                _ => prop_assert!(false, "aux presence differs"),
            }
        }
    }
}
