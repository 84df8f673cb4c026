//! Central finite-difference checks of analytic gradients at 64-bit
//! precision, on a random subset of input coordinates.

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;

use st4d_core::cognition_graph::{CognitionEncoder, GraphConfig};
use st4d_core::foundation::{Foundation, FoundationConfig, TokenBundle};
use st4d_core::gaussians4d::chamfer;
use st4d_core::latent_codec::{CodecConfig, LatentCodec};
use st4d_core::nn::layers::{scalar, to_f64_vec};
use st4d_core::nn::{rng, ParamStore};
use st4d_core::scene_synth::{synth_scene, SyntheticSceneSpec};

const H: f64 = 1e-5;

/// Relative error `‖a − n‖ / max(‖a‖, ‖n‖)` between the analytic gradient of
/// `f` at `x` and central differences on `samples` random coordinates.
fn fd_rel_error(f: &dyn Fn(&Tensor) -> Tensor, x: &Tensor, samples: usize, seed: u64) -> f64 {
    let var = Var::from_tensor(x).unwrap();
    let grads = f(var.as_tensor()).backward().unwrap();
    let analytic = grads
        .get(var.as_tensor())
        .map(|g| to_f64_vec(g).unwrap())
        .unwrap_or_else(|| vec![0.0; x.elem_count()]);
    let flat = to_f64_vec(x).unwrap();
    let dims = x.dims().to_vec();
    let mut r = rng::seeded(seed);
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for _ in 0..samples {
        let k = r.random_range(0..flat.len());
        let eval = |delta: f64| {
            let mut v = flat.clone();
            v[k] += delta;
            scalar(&f(&Tensor::from_vec(v, dims.as_slice(), &Device::Cpu).unwrap())).unwrap()
        };
        let numeric = (eval(H) - eval(-H)) / (2.0 * H);
        diff += (analytic[k] - numeric).powi(2);
        na += analytic[k].powi(2);
        nn += numeric.powi(2);
    }
    assert!(na.max(nn) > 0.0, "readout does not depend on the sampled inputs");
    diff.sqrt() / na.max(nn).sqrt()
}

fn weighted_sum(t: &Tensor, seed: u64) -> Tensor {
    let w = rng::randn(&mut rng::seeded(seed), t.dims(), DType::F64, &Device::Cpu).unwrap();
    (t * w).unwrap().sum_all().unwrap()
}

fn small_foundation() -> (ParamStore, Foundation) {
    let cfg = FoundationConfig { image_size: 16, patch: 4, d: 16, d_a: 8, logical_tokens: 2, heads: 2, ..Default::default() };
    let store = ParamStore::cpu(3, DType::F64);
    let f = Foundation::new(&store.builder("foundation"), &cfg).unwrap();
    (store, f)
}

fn images(seed: u64, n: usize) -> Tensor {
    rng::rand_uniform(&mut rng::seeded(seed), &[n, 16, 16, 3], 0.0, 1.0, DType::F64, &Device::Cpu).unwrap()
}

#[test]
fn foundation_encoders_match_finite_differences() {
    let (_store, f) = small_foundation();
    let frames = images(1, 3);
    let views = images(2, 2);
    let readout = |fr: &Tensor, vw: &Tensor| {
        let b = f.encode(fr, vw, "a blue cube").unwrap();
        let parts = [
            weighted_sum(&b.semantic, 10),
            weighted_sum(&b.spatial, 11),
            weighted_sum(&b.temporal, 12),
            weighted_sum(&b.logical, 13),
            weighted_sum(&b.action, 14),
            weighted_sum(&b.patch_depth, 15),
        ];
        parts.into_iter().reduce(|a, b| (a + b).unwrap()).unwrap()
    };
    let e_frames = fd_rel_error(&|x| readout(x, &views), &frames, 24, 20);
    let e_views = fd_rel_error(&|x| readout(&frames, x), &views, 24, 21);
    assert!(e_frames < 1e-2, "frames: {e_frames}");
    assert!(e_views < 1e-2, "views: {e_views}");
}

fn bundle_from(f: &Foundation) -> TokenBundle {
    f.encode(&images(4, 2), &images(5, 2), "two spheres").unwrap()
}

fn field(b: &mut TokenBundle, i: usize) -> &mut Tensor {
    match i {
        0 => &mut b.semantic,
        1 => &mut b.spatial,
        2 => &mut b.temporal,
        _ => &mut b.logical,
    }
}

#[test]
fn fused_graph_matches_finite_differences() {
    let (_store, f) = small_foundation();
    let cfg = GraphConfig { nodes: 6, d: 16, d_e: 8, topk: 3, pe_dim: 12, heads: 2, edge_hidden: 16, msg_hidden: 16, ..Default::default() };
    let store = ParamStore::cpu(9, DType::F64);
    let enc = CognitionEncoder::new(&store.builder("graph"), &cfg).unwrap();
    let base = bundle_from(&f);
    let readout = |b: &TokenBundle| {
        let g = enc.encode(b).unwrap().fused;
        (weighted_sum(&g.nodes, 30) + weighted_sum(&g.edge_feats, 31)).unwrap()
    };
    let names = ["semantic", "spatial", "temporal", "logical"];
    for (i, name) in names.iter().enumerate() {
        let x = field(&mut base.clone(), i).clone();
        let f = |x: &Tensor| {
            let mut b = base.clone();
            *field(&mut b, i) = x.clone();
            readout(&b)
        };
        let e = fd_rel_error(&f, &x, 24, 40 + i as u64);
        assert!(e < 1e-2, "{name}: {e}");
    }
}

#[test]
fn codec_round_trip_chamfer_matches_finite_differences() {
    let cfg = CodecConfig {
        resolution: 8,
        latent_dim: 8,
        gaussians: 16,
        conv_channels: [4, 8, 8],
        width: 16,
        heads: 2,
        ..Default::default()
    };
    let store = ParamStore::cpu(11, DType::F64);
    let codec = LatentCodec::new(&store.builder("codec"), &cfg).unwrap();
    let spec = SyntheticSceneSpec { gaussians_per_object: 8, ..Default::default() };
    let scene = synth_scene(&spec).unwrap().to_dtype(DType::F64).unwrap();
    // Colours enter the encoder through the voxel attribute means.
    let readout = |colors: &Tensor| {
        let mut s = scene.clone();
        s.colors = colors.clone();
        let pred = codec.decode(&codec.encode_eval(&s).unwrap().z, cfg.gaussians).unwrap();
        chamfer(&pred.positions, &s.positions).unwrap()
    };
    let e = fd_rel_error(&readout, &scene.colors, 24, 50);
    assert!(e < 1e-2, "colors: {e}");
}
