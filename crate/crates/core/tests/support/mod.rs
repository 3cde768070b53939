//! Brute-force reference implementations shared by the integration and
//! acceptance tests. Written for clarity, not speed.
#![allow(dead_code)]

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use voxelnext::ops::{ConvSpec, GrnDivisor};
use voxelnext::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn idx5(s: &[usize], i: [usize; 5]) -> usize {
    (((i[0] * s[1] + i[1]) * s[2] + i[2]) * s[3] + i[3]) * s[4] + i[4]
}

/// Direct loop convolution. Forward: gather over the kernel window.
/// Transposed: scatter every input voxel through the kernel, then crop
/// `padding` from the low side.
pub fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, bias: &Tensor<f64>, spec: &ConvSpec) -> Tensor<f64> {
    let xs = x.shape().to_vec();
    let ws = w.shape().to_vec();
    let (b, cin) = (xs[0], xs[1]);
    let cout = spec.out_channels;
    let g = spec.groups;
    let (cin_g, cout_g) = (cin / g, cout / g);
    let k = spec.kernel;
    let st = spec.stride;
    let pad = spec.padding;
    let ext = spec.output_extents([xs[2], xs[3], xs[4]]).unwrap();
    let os = vec![b, cout, ext[0], ext[1], ext[2]];
    let mut out = vec![0.0; os.iter().product()];
    for n in 0..b {
        for o in 0..cout {
            for z in 0..ext[0] {
                for y in 0..ext[1] {
                    for xx in 0..ext[2] {
                        out[idx5(&os, [n, o, z, y, xx])] = bias.data()[o];
                    }
                }
            }
        }
    }
    if !spec.transposed {
        for n in 0..b {
            for o in 0..cout {
                let grp = o / cout_g;
                for z in 0..ext[0] {
                    for y in 0..ext[1] {
                        for xx in 0..ext[2] {
                            let mut acc = 0.0;
                            for ci in 0..cin_g {
                                for kd in 0..k[0] {
                                    for kh in 0..k[1] {
                                        for kw in 0..k[2] {
                                            let iz = (z * st[0] + kd) as isize - pad[0] as isize;
                                            let iy = (y * st[1] + kh) as isize - pad[1] as isize;
                                            let ix = (xx * st[2] + kw) as isize - pad[2] as isize;
                                            if iz < 0 || iy < 0 || ix < 0 {
                                                continue;
                                            }
                                            let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                            if iz >= xs[2] || iy >= xs[3] || ix >= xs[4] {
                                                continue;
                                            }
                                            acc += x.data()[idx5(&xs, [n, grp * cin_g + ci, iz, iy, ix])]
                                                * w.data()[idx5(&ws, [o, ci, kd, kh, kw])];
                                        }
                                    }
                                }
                            }
                            out[idx5(&os, [n, o, z, y, xx])] += acc;
                        }
                    }
                }
            }
        }
    } else {
        for n in 0..b {
            for ci in 0..cin {
                let grp = ci / cin_g;
                for z in 0..xs[2] {
                    for y in 0..xs[3] {
                        for xx in 0..xs[4] {
                            let v = x.data()[idx5(&xs, [n, ci, z, y, xx])];
                            for oc in 0..cout_g {
                                for kd in 0..k[0] {
                                    for kh in 0..k[1] {
                                        for kw in 0..k[2] {
                                            let oz = (z * st[0] + kd) as isize - pad[0] as isize;
                                            let oy = (y * st[1] + kh) as isize - pad[1] as isize;
                                            let ox = (xx * st[2] + kw) as isize - pad[2] as isize;
                                            if oz < 0 || oy < 0 || ox < 0 {
                                                continue;
                                            }
                                            let (oz, oy, ox) = (oz as usize, oy as usize, ox as usize);
                                            if oz >= ext[0] || oy >= ext[1] || ox >= ext[2] {
                                                continue;
                                            }
                                            out[idx5(&os, [n, grp * cout_g + oc, oz, oy, ox])] +=
                                                v * w.data()[idx5(&ws, [ci, oc, kd, kh, kw])];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(os, out).unwrap()
}

/// Scalar GRN: one (sample, channel, voxel) at a time.
pub fn grn_oracle(x: &Tensor<f64>, gamma: &[f64], beta: &[f64], mode: GrnDivisor, eps: f64) -> Tensor<f64> {
    let s = x.shape().to_vec();
    let (b, c) = (s[0], s[1]);
    let vol = s[2] * s[3] * s[4];
    let mut out = x.data().to_vec();
    for n in 0..b {
        let norm = |i: usize| -> f64 {
            let start = (n * c + i) * vol;
            x.data()[start..start + vol].iter().map(|v| v * v).sum::<f64>().sqrt()
        };
        let total: f64 = (0..c).map(norm).sum();
        let divisor = match mode {
            GrnDivisor::Sum => total,
            GrnDivisor::Mean => total / c as f64,
        };
        for i in 0..c {
            let big_n = norm(i) / (divisor + eps);
            for v in 0..vol {
                let j = (n * c + i) * vol + v;
                out[j] = gamma[i] * x.data()[j] * big_n + beta[i] + x.data()[j];
            }
        }
    }
    Tensor::from_vec(s, out).unwrap()
}

pub fn random_mask(rng: &mut ChaCha8Rng, ext: [usize; 3], density: f64) -> Tensor<bool> {
    let n = ext.iter().product();
    Tensor::from_vec(ext.to_vec(), (0..n).map(|_| rng.random_bool(density)).collect()).unwrap()
}

fn voxels(m: &Tensor<bool>) -> HashSet<[usize; 3]> {
    let s = m.shape();
    let mut set = HashSet::new();
    for z in 0..s[0] {
        for y in 0..s[1] {
            for x in 0..s[2] {
                if m.get(&[z, y, x]) {
                    set.insert([z, y, x]);
                }
            }
        }
    }
    set
}

pub fn dsc_oracle(p: &Tensor<bool>, g: &Tensor<bool>) -> f64 {
    let (a, b) = (voxels(p), voxels(g));
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    2.0 * a.intersection(&b).count() as f64 / (a.len() + b.len()) as f64
}

/// Surface of a mask embedded in a background margin: a foreground voxel
/// with any face neighbour outside the foreground set.
fn surface_oracle(m: &Tensor<bool>) -> Vec<[usize; 3]> {
    let fg = voxels(m);
    let mut out: Vec<[usize; 3]> = fg
        .iter()
        .filter(|v| {
            let c = [v[0] as isize, v[1] as isize, v[2] as isize];
            [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]]
                .iter()
                .any(|d: &[isize; 3]| {
                    let n = [c[0] + d[0], c[1] + d[1], c[2] + d[2]];
                    n.iter().any(|&q| q < 0)
                        || !fg.contains(&[n[0] as usize, n[1] as usize, n[2] as usize])
                })
        })
        .copied()
        .collect();
    out.sort();
    out
}

pub fn nsd_oracle(p: &Tensor<bool>, g: &Tensor<bool>, tol: f64, spacing: [f64; 3]) -> f64 {
    let (sp, sg) = (surface_oracle(p), surface_oracle(g));
    if sp.is_empty() && sg.is_empty() {
        return 1.0;
    }
    if sp.is_empty() || sg.is_empty() {
        return 0.0;
    }
    let dist = |a: &[usize; 3], b: &[usize; 3]| {
        (0..3)
            .map(|i| ((a[i] as f64 - b[i] as f64) * spacing[i]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let near = |from: &[[usize; 3]], to: &[[usize; 3]]| {
        from.iter().filter(|a| to.iter().any(|b| dist(a, b) <= tol)).count()
    };
    (near(&sp, &sg) + near(&sg, &sp)) as f64 / (sp.len() + sg.len()) as f64
}

/// A random small convolution: dense, grouped, depthwise, strided or
/// transposed, with per-axis kernels. Returns the `ConvSpec` and an input shape.
pub fn random_conv_case(rng: &mut ChaCha8Rng) -> (ConvSpec, [usize; 5]) {
    let kind = rng.random_range(0..5);
    let groups = match kind {
        1 => 2,
        2 => 0,
        _ => 1,
    };
    let cin = if groups == 0 { rng.random_range(1..=4) } else { groups * rng.random_range(1..=2) };
    let cout = match groups {
        0 => cin,
        g => g * rng.random_range(1..=2),
    };
    let mut spec = ConvSpec::new(cin, cout, 1).with_groups(if groups == 0 { cin } else { groups });
    for a in 0..3 {
        spec.kernel[a] = rng.random_range(1..=3);
        spec.stride[a] = if kind >= 3 { rng.random_range(1..=2) } else { 1 };
        spec.padding[a] = rng.random_range(0..spec.kernel[a]);
    }
    if kind == 4 {
        spec.transposed = true;
        for a in 0..3 {
            spec.output_padding[a] = rng.random_range(0..spec.stride[a]);
        }
    }
    let mut shape = [rng.random_range(1..=2), cin, 0, 0, 0];
    for a in 0..3 {
        shape[2 + a] = rng.random_range(spec.kernel[a].max(2)..=5);
        while spec.transposed
            && (shape[2 + a] - 1) * spec.stride[a] + spec.kernel[a] + spec.output_padding[a]
                <= 2 * spec.padding[a]
        {
            shape[2 + a] += 1;
        }
    }
    (spec, shape)
}

pub fn instance_norm_oracle(x: &Tensor<f64>, gamma: &[f64], beta: &[f64], eps: f64) -> Tensor<f64> {
    let s = x.shape().to_vec();
    let vol = s[2] * s[3] * s[4];
    let mut out = x.data().to_vec();
    for (p, plane) in out.chunks_mut(vol).enumerate() {
        let c = p % s[1];
        let mean = plane.iter().sum::<f64>() / vol as f64;
        let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vol as f64;
        for v in plane.iter_mut() {
            *v = gamma[c] * (*v - mean) / (var + eps).sqrt() + beta[c];
        }
    }
    Tensor::from_vec(s, out).unwrap()
}

pub fn gelu_oracle(x: &Tensor<f64>) -> Tensor<f64> {
    x.map(|v| 0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2)))
}

fn add(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    assert_eq!(a.shape(), b.shape());
    Tensor::from_vec(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).unwrap()
}

/// Straight-line forward pass of a built network, reading parameters by
/// name and recomputing every layer with the loop oracles above.
pub fn forward_oracle(net: &voxelnext::network::Network<f64>, x: &Tensor<f64>) -> Vec<Tensor<f64>> {
    let cfg = net.config().clone();
    let p = |name: &str| -> Tensor<f64> {
        net.params()[net.param_index(name).unwrap_or_else(|| panic!("no parameter {name}"))].clone()
    };
    let conv = |x: &Tensor<f64>, name: &str, spec: ConvSpec| {
        conv_oracle(x, &p(&format!("{name}.weight")), &p(&format!("{name}.bias")), &spec)
    };
    #[derive(Clone, Copy, PartialEq)]
    enum Kind {
        Plain,
        Down,
        Up,
    }
    let block = |x: &Tensor<f64>, name: &str, kind: Kind| -> Tensor<f64> {
        let c = x.shape()[1];
        let out_c = match kind {
            Kind::Plain => c,
            Kind::Down => 2 * c,
            Kind::Up => c / 2,
        };
        let mut dw = ConvSpec::depthwise(c, cfg.kernel);
        if kind != Kind::Plain {
            dw = dw.with_stride(2);
        }
        if kind == Kind::Up {
            dw = dw.transposed();
        }
        let h = conv(x, &format!("{name}.dw"), dw);
        let h = instance_norm_oracle(
            &h,
            p(&format!("{name}.norm.gamma")).data(),
            p(&format!("{name}.norm.beta")).data(),
            voxelnext::ops::INSTANCE_NORM_EPS,
        );
        let hidden = p(&format!("{name}.expand.weight")).shape()[0];
        let h = gelu_oracle(&conv(&h, &format!("{name}.expand"), ConvSpec::pointwise(c, hidden)));
        let h = if cfg.grn {
            grn_oracle(
                &h,
                p(&format!("{name}.grn.gamma")).data(),
                p(&format!("{name}.grn.beta")).data(),
                cfg.grn_divisor,
                voxelnext::ops::GRN_EPS,
            )
        } else {
            h
        };
        let h = conv(&h, &format!("{name}.compress"), ConvSpec::pointwise(hidden, out_c));
        let skip = match kind {
            Kind::Plain => x.clone(),
            Kind::Down => conv(x, &format!("{name}.res"), ConvSpec::pointwise(c, out_c).with_stride(2)),
            Kind::Up => conv(
                x,
                &format!("{name}.res"),
                ConvSpec::pointwise(c, out_c).with_stride(2).transposed(),
            ),
        };
        add(&h, &skip)
    };
    let mut h = conv(x, "stem", ConvSpec::pointwise(cfg.in_channels, cfg.base_channels));
    let mut skips = Vec::new();
    for s in 0..4 {
        for j in 0..cfg.stage_blocks[s] {
            h = block(&h, &format!("enc{s}.block{j}"), Kind::Plain);
        }
        skips.push(h.clone());
        h = block(&h, &format!("down{s}"), Kind::Down);
    }
    for j in 0..cfg.stage_blocks[4] {
        h = block(&h, &format!("bottleneck.block{j}"), Kind::Plain);
    }
    let levels = cfg.deep_supervision_levels;
    let head = |h: &Tensor<f64>, k: usize| {
        conv(h, &format!("head{k}"), ConvSpec::pointwise(h.shape()[1], cfg.num_classes))
    };
    let mut outs: Vec<Option<Tensor<f64>>> = vec![None; levels];
    if levels == 5 {
        outs[4] = Some(head(&h, 4));
    }
    for s in (0..4).rev() {
        h = add(&block(&h, &format!("up{s}"), Kind::Up), &skips[s]);
        for j in 0..cfg.stage_blocks[8 - s] {
            h = block(&h, &format!("dec{s}.block{j}"), Kind::Plain);
        }
        if s < levels {
            outs[s] = Some(head(&h, s));
        }
    }
    outs.into_iter().map(Option::unwrap).collect()
}

/// Closed-form parameter count of the block layout, independent of the
/// builder.
pub fn parameter_formula(cfg: &voxelnext::network::NetworkConfig) -> usize {
    let k3 = cfg.kernel.pow(3);
    let block = |c: usize, out: usize, r: usize, projected: bool| {
        let h = c * r;
        let mut n = c * k3 + c + 2 * c + c * h + h + h * out + out;
        if cfg.grn {
            n += 2 * h;
        }
        if projected {
            n += c * out + out;
        }
        n
    };
    let w = |s: usize| cfg.base_channels << s;
    let r = cfg.expansion_ratios;
    let b = cfg.stage_blocks;
    let mut n = cfg.in_channels * w(0) + w(0);
    for s in 0..4 {
        n += b[s] * block(w(s), w(s), r[s], false);
        n += block(w(s), w(s + 1), r[s + 1], true);
    }
    n += b[4] * block(w(4), w(4), r[4], false);
    for s in 0..4 {
        n += block(w(s + 1), w(s), r[8 - s], true);
        n += b[8 - s] * block(w(s), w(s), r[8 - s], false);
    }
    for k in 0..cfg.deep_supervision_levels {
        n += w(k) * cfg.num_classes + cfg.num_classes;
    }
    n
}
