//! Optimized kernels against the naive nested-loop references.

mod common;

use common::uniform;
use dcvnet::cost_volume::{build_cost_volume, CostVolumeSpec};
use dcvnet::kernels::{self, Conv2dSpec, Conv3dSpec};
use dcvnet::reference;
use dcvnet::Tensor;
use proptest::prelude::*;

const TOL: f64 = 1e-10;

fn cases() -> ProptestConfig {
    ProptestConfig::with_cases(24)
}

proptest! {
    #![proptest_config(cases())]

    #[test]
    fn conv2d_matches_reference(
        cin in 1usize..5, cout in 1usize..5,
        kh in 1usize..4, kw in 1usize..4,
        sh in 1usize..3, sw in 1usize..3,
        ph in 0usize..3, pw in 0usize..3,
        dh in 1usize..3, dw in 1usize..3,
        h in 6usize..14, w in 6usize..14,
        seed in any::<u64>(),
    ) {
        let spec = Conv2dSpec {
            in_channels: cin,
            out_channels: cout,
            kernel: [kh, kw],
            stride: [sh, sw],
            padding: [ph, pw],
            dilation: [dh, dw],
        };
        let x = uniform(&[cin, h, w], seed);
        let wt = uniform(&spec.weight_shape(), seed ^ 1);
        let b = uniform(&[cout], seed ^ 2);
        let fast = kernels::conv2d(&x, &wt, &b, &spec).unwrap();
        let slow = reference::conv2d(&x, &wt, &b, spec.stride, spec.padding, spec.dilation);
        prop_assert_eq!(fast.shape(), slow.shape());
        prop_assert!(fast.max_abs_diff(&slow) < TOL);
    }

    #[test]
    fn conv3d_matches_reference(
        cin in 1usize..4, cout in 1usize..4,
        k in prop::array::uniform3(1usize..4),
        s in prop::array::uniform3(1usize..3),
        p in prop::array::uniform3(0usize..3),
        d in prop::array::uniform3(1usize..3),
        ext in prop::array::uniform3(5usize..9),
        seed in any::<u64>(),
    ) {
        let spec = Conv3dSpec {
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            stride: s,
            padding: p,
            dilation: d,
        };
        let x = uniform(&[cin, ext[0], ext[1], ext[2]], seed);
        let wt = uniform(&spec.weight_shape(), seed ^ 1);
        let b = uniform(&[cout], seed ^ 2);
        let fast = kernels::conv3d(&x, &wt, &b, &spec).unwrap();
        let slow = reference::conv3d(&x, &wt, &b, s, p, d);
        prop_assert_eq!(fast.shape(), slow.shape());
        prop_assert!(fast.max_abs_diff(&slow) < TOL);
    }

    #[test]
    fn conv_transpose3d_matches_reference(
        cin in 1usize..4, cout in 1usize..4,
        k in 1usize..4, s in 1usize..3,
        ext in prop::array::uniform3(2usize..6),
        op in prop::array::uniform3(0usize..2),
        seed in any::<u64>(),
    ) {
        let spec = Conv3dSpec::new(cin, cout, k).with_stride(s).with_padding(k / 2);
        let op = op.map(|o| o.min(s - 1));
        let x = uniform(&[cout, ext[0], ext[1], ext[2]], seed);
        let wt = uniform(&spec.weight_shape(), seed ^ 1);
        let b = uniform(&[cin], seed ^ 2);
        if let Ok(fast) = kernels::conv_transpose3d(&x, &wt, &b, &spec, op) {
            let slow = reference::conv_transpose3d(&x, &wt, &b, spec.stride, spec.padding, op);
            prop_assert_eq!(fast.shape(), slow.shape());
            prop_assert!(fast.max_abs_diff(&slow) < TOL);
        }
    }

    #[test]
    fn instance_norm_matches_reference(
        c in 1usize..6, h in 1usize..12, w in 2usize..12,
        seed in any::<u64>(),
    ) {
        let x = uniform(&[c, h, w], seed).map(|v| 5.0 * v + 2.0);
        let gain = uniform(&[c], seed ^ 1);
        let shift = uniform(&[c], seed ^ 2);
        let fast = kernels::instance_norm2d(&x, &gain, &shift, 1e-5).unwrap();
        let slow = reference::instance_norm2d(&x, &gain, &shift, 1e-5);
        prop_assert!(fast.max_abs_diff(&slow) < TOL);
    }

    #[test]
    fn softmax_matches_reference(
        shape in prop::collection::vec(1usize..7, 1..5),
        axis_pick in any::<prop::sample::Index>(),
        scale in 0.1f64..50.0,
        seed in any::<u64>(),
    ) {
        let axis = axis_pick.index(shape.len());
        let x = uniform(&shape, seed).map(|v| scale * v);
        let fast = kernels::softmax(&x, axis).unwrap();
        let slow = reference::softmax(&x, axis);
        prop_assert!(fast.max_abs_diff(&slow) < TOL);
    }

    #[test]
    fn cost_volume_matches_reference_bit_for_bit(
        stride in prop::sample::select(vec![2usize, 8]),
        dilation in 1usize..6,
        radius in 0usize..5,
        groups in 1usize..5,
        sub in 1usize..5,
        h in 1usize..12, w in 1usize..12,
        seed in any::<u64>(),
    ) {
        let spec = CostVolumeSpec { stride, dilation, radius, groups };
        let ch = groups * sub;
        let f1 = uniform(&[ch, h, w], seed);
        let f2 = uniform(&[ch, h, w], seed ^ 1);
        let fast = build_cost_volume(&f1, &f2, &spec).unwrap();
        let slow = reference::cost_volume(&f1, &f2, &spec);
        prop_assert_eq!(&fast.data, &slow);
    }

    #[test]
    fn cost_volume_wide_rows_bit_for_bit(
        dilation in 1usize..4,
        groups in 1usize..3,
        sub in prop::sample::select(vec![1usize, 3, 8, 11]),
        h in 1usize..6, w in 9usize..48,
        seed in any::<u64>(),
    ) {
        let spec = CostVolumeSpec { stride: 8, dilation, radius: 4, groups };
        let ch = groups * sub;
        let f1 = uniform(&[ch, h, w], seed);
        let f2 = uniform(&[ch, h, w], seed ^ 1);
        let fast = build_cost_volume(&f1, &f2, &spec).unwrap();
        let slow = reference::cost_volume(&f1, &f2, &spec);
        prop_assert_eq!(&fast.data, &slow);
    }
}

#[test]
fn transpose_is_adjoint_of_conv3d() {
    let spec = Conv3dSpec::same(3, 2, 3).with_stride(2);
    let x = uniform(&[3, 5, 6, 7], 1);
    let w = uniform(&spec.weight_shape(), 2);
    let zeros_out = Tensor::zeros(&[2]);
    let zeros_in = Tensor::zeros(&[3]);
    let y = kernels::conv3d(&x, &w, &zeros_out, &spec).unwrap();
    let g = uniform(y.shape(), 3);
    let back = kernels::conv_transpose3d(&g, &w, &zeros_in, &spec, [0, 1, 0]).unwrap();
    assert_eq!(back.shape(), x.shape());
    let lhs = y.dot(&g);
    let rhs = x.dot(&back);
    assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
}

#[test]
fn zero_sub_vectors_give_zero_cost() {
    let spec = CostVolumeSpec::new(8, 1);
    let mut f1 = uniform(&[8, 3, 3], 4);
    for c in 0..2 {
        f1.set(&[c, 1, 1], 0.0);
    }
    let f2 = uniform(&[8, 3, 3], 5);
    let vol = build_cost_volume(&f1, &f2, &spec).unwrap();
    for i in 0..9 {
        for j in 0..9 {
            assert_eq!(vol.data.at(&[0, i, j, 1, 1]), 0.0);
        }
    }
    assert_eq!(vol.data, reference::cost_volume(&f1, &f2, &spec));
}
