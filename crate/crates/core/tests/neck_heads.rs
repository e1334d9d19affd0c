use proptest::prelude::*;
use vrnet_core::coc::StagePair;
use vrnet_core::eval::argmax_mask;
use vrnet_core::heads::{decode_box, decoded_boxes, encode_box, Anchor, DetHead, SegHead};
use vrnet_core::model::{Model, ModelConfig};
use vrnet_core::neck::{Aspp, Fpn, NeckConfig};
use vrnet_tensor::{Graph, ParamStore, Rng, Tensor};

fn random(rng: &mut Rng, dims: Vec<usize>) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims, (0..n).map(|_| rng.range(-1.0, 1.0)).collect()).unwrap()
}

#[test]
fn desk_model_output_shapes() {
    let cfg = ModelConfig::desk();
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, &cfg).unwrap();
    let mut rng = Rng::new(1);
    let mut g = Graph::new();
    let out = model
        .forward(&mut g, &store, &random(&mut rng, vec![3, 64, 64]), &random(&mut rng, vec![4, 64, 64]))
        .unwrap();
    assert_eq!(cfg.level_strides(), vec![8, 16, 32]);
    for (lvl, extent) in out.det.levels.iter().zip([8, 4, 2]) {
        assert_eq!(g.dims(lvl.reg), &[4, extent, extent]);
        assert_eq!(g.dims(lvl.obj), &[1, extent, extent]);
        assert_eq!(g.dims(lvl.cls), &[cfg.c_seg, extent, extent]);
    }
    assert_eq!(out.det.anchors.len(), 64 + 16 + 4);
    assert_eq!(g.dims(out.seg_logits), &[5, 64, 64]);
    assert!(model
        .forward(&mut g, &store, &Tensor::zeros(vec![3, 32, 32]), &Tensor::zeros(vec![4, 32, 32]))
        .is_err());
}

fn neck_inputs(g: &mut Graph, rng: &mut Rng, dims: &[usize], vision_shift: f64) -> Vec<StagePair> {
    dims.iter()
        .zip([8, 4, 2])
        .map(|(&d, e)| {
            let v = random(rng, vec![d, e, e]);
            let v = Tensor::new(v.dims().to_vec(), v.data().iter().map(|x| x + vision_shift).collect()).unwrap();
            StagePair {
                vision: g.constant(v),
                radar: g.constant(random(rng, vec![d, e, e])),
            }
        })
        .collect()
}

#[test]
fn neck_without_fusion_isolates_radar() {
    let dims = [8, 8, 8];
    let mut base = NeckConfig::desk();
    base.dim = 8;
    base.heads = 2;
    for fused in [false, true] {
        let cfg = NeckConfig { neck_fusion: fused, ..base.clone() };
        let mut store = ParamStore::new();
        let fpn = Fpn::new(&mut store, &mut Rng::new(0), &dims, &cfg).unwrap();
        let mut g = Graph::new();
        let a = neck_inputs(&mut g, &mut Rng::new(5), &dims, 0.0);
        let b = neck_inputs(&mut g, &mut Rng::new(5), &dims, 0.5);
        let pa = fpn.forward(&mut g, &store, &a).unwrap();
        let pb = fpn.forward(&mut g, &store, &b).unwrap();
        let same = (0..3).all(|l| g.data(pa.radar[l]) == g.data(pb.radar[l]));
        assert_eq!(same, !fused);
        assert!((0..3).all(|l| g.data(pa.vision[l]) != g.data(pb.vision[l])));
        for (l, e) in [8, 4, 2].into_iter().enumerate() {
            assert_eq!(g.dims(pa.vision[l]), &[8, e, e]);
            assert_eq!(g.dims(pa.radar[l]), &[8, e, e]);
        }
    }
}

#[test]
fn aspp_with_center_taps_keeps_constant_maps_constant() {
    let mut rng = Rng::new(2);
    let mut store = ParamStore::new();
    let dim = 3;
    let aspp = Aspp::new(&mut store, &mut rng, "a", dim, &[1, 2, 4]);
    let mut expected_branch = Vec::new();
    for b in &aspp.branches {
        let w = store.get_mut(b.w);
        let data = w.data_mut();
        for o in 0..dim {
            for i in 0..dim {
                for k in 0..9 {
                    if k != 4 {
                        data[(o * dim + i) * 9 + k] = 0.0;
                    }
                }
            }
        }
        let w = store.get(b.w).data().to_vec();
        let bias = store.get(b.b.unwrap()).data().to_vec();
        for o in 0..dim {
            expected_branch.push(bias[o] + (0..dim).map(|i| w[(o * dim + i) * 9 + 4] * 0.7).sum::<f64>());
        }
    }
    let fw = store.get(aspp.fuse.w).data();
    let fb = store.get(aspp.fuse.b.unwrap()).data();
    let k = 3 * dim;
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(vec![dim, 8, 8], 0.7));
    let y = aspp.forward(&mut g, &store, x).unwrap();
    for o in 0..dim {
        let want = fb[o] + (0..k).map(|i| fw[o * k + i] * expected_branch[i]).sum::<f64>();
        for p in 0..64 {
            assert!((g.data(y)[o * 64 + p] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn seg_head_resolution_and_tie_breaking() {
    let mut rng = Rng::new(3);
    let mut store = ParamStore::new();
    let head = SegHead::new(&mut store, &mut rng, 16, 8, 5, 8);
    let mut g = Graph::new();
    let x = g.constant(random(&mut rng, vec![16, 8, 8]));
    let y = head.forward(&mut g, &store, x).unwrap();
    assert_eq!(g.dims(y), &[5, 64, 64]);

    head.classifier.zero(&mut store);
    let mut g = Graph::new();
    let x = g.constant(random(&mut rng, vec![16, 8, 8]));
    let y = head.forward(&mut g, &store, x).unwrap();
    assert!(argmax_mask(g.data(y), 5).iter().all(|&c| c == 0));
}

#[test]
fn coupled_head_keeps_outputs_with_fewer_params() {
    let mut rng = Rng::new(4);
    let maps: Vec<Tensor> = [4, 2].iter().map(|&e| random(&mut rng, vec![8, e, e])).collect();
    let mut counts = Vec::new();
    let mut shapes = Vec::new();
    for decoupled in [true, false] {
        let mut store = ParamStore::new();
        let head = DetHead::new(&mut store, &mut Rng::new(0), 8, 6, 3, &[16, 32], decoupled);
        let mut g = Graph::new();
        let vars: Vec<_> = maps.iter().map(|m| g.constant(m.clone())).collect();
        let out = head.forward(&mut g, &store, &vars).unwrap();
        shapes.push((g.dims(out.reg).to_vec(), g.dims(out.obj).to_vec(), g.dims(out.cls).to_vec()));
        counts.push(store.num_scalars());
    }
    assert_eq!(shapes[0], shapes[1]);
    assert_eq!(shapes[0].0, vec![4, 20]);
    // one fewer 3×3 hidden conv per level
    assert_eq!(counts[0] - counts[1], 2 * (6 * 6 * 9 + 6));
}

proptest! {
    #[test]
    fn encode_inverts_decode(x in 0usize..8, y in 0usize..8, stride in prop::sample::select(vec![8usize, 16, 32]),
                             dx in -2.0..3.0f64, dy in -2.0..3.0f64, dw in -5.9..5.9f64, dh in -5.9..5.9f64) {
        let a = Anchor { level: 0, x, y, stride };
        let (cx, cy, w, h) = decode_box(&a, [dx, dy, dw, dh]);
        let r = encode_box(&a, cx, cy, w, h);
        for (got, want) in r.iter().zip([dx, dy, dw, dh]) {
            prop_assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn decoded_boxes_have_positive_extent(seed in 0u64..200) {
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let head = DetHead::new(&mut store, &mut rng, 4, 4, 2, &[8], true);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let dims = store.get(id).dims().to_vec();
            *store.get_mut(id) = Tensor::new(dims.clone(), (0..dims.iter().product()).map(|_| rng.range(-20.0, 20.0)).collect()).unwrap();
        }
        let mut g = Graph::new();
        let m = g.constant(random(&mut rng, vec![4, 3, 3]));
        let out = head.forward(&mut g, &store, &[m]).unwrap();
        for b in decoded_boxes(&g, &out) {
            prop_assert!(b[2] > b[0] && b[3] > b[1]);
        }
    }
}
