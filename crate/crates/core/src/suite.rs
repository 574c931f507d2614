//! Canned gradient checks over every differentiable component.

use std::fmt;
use std::str::FromStr;

use crate::cit::{Cit, CitConfig};
use crate::error::{Error, Result};
use crate::fusion::{Fuser, FuserKind, FusionConfig};
use crate::gradcheck::{gradient_check, GradCheckOptions};
use crate::graph::{Graph, NodeId};
use crate::head::{FocalConfig, SegHead};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Stream used for suite inputs, kept apart from the library streams.
const SUITE_STREAM: u64 = 0x5u64 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Ops,
    Cit,
    Fusers,
    Focal,
    Head,
    All,
}

impl Component {
    pub const EACH: [Component; 5] = [
        Component::Ops,
        Component::Cit,
        Component::Fusers,
        Component::Focal,
        Component::Head,
    ];
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Component::Ops => "ops",
            Component::Cit => "cit",
            Component::Fusers => "fusers",
            Component::Focal => "focal",
            Component::Head => "head",
            Component::All => "all",
        })
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Component::Ops),
            "cit" => Ok(Component::Cit),
            "fusers" => Ok(Component::Fusers),
            "focal" => Ok(Component::Focal),
            "head" => Ok(Component::Head),
            "all" => Ok(Component::All),
            _ => Err(Error::Input(format!(
                "unknown component `{s}` (expected ops|cit|fusers|focal|head|all)"
            ))),
        }
    }
}

/// Worst relative error for one parameter group of one check.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub check: String,
    pub group: String,
    pub max_rel_err: f64,
    pub coords: usize,
}

fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal())
}

fn projected(g: &mut Graph, out: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = Rng::new(seed, SUITE_STREAM + 1);
    let r = random(g.shape(out), &mut rng);
    let r = g.constant(r);
    let prod = g.mul(out, r)?;
    g.sum(prod)
}

fn run<F>(out: &mut Vec<SuiteEntry>, check: &str, params: &ParamStore, seed: u64, f: F) -> Result<()>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let opts = GradCheckOptions {
        seed,
        ..GradCheckOptions::default()
    };
    let report = gradient_check(params, f, &opts)?;
    for p in report.params {
        out.push(SuiteEntry {
            check: check.to_owned(),
            group: p.name,
            max_rel_err: p.max_rel_err,
            coords: p.coords_checked,
        });
    }
    Ok(())
}

fn store(entries: Vec<(&str, Tensor)>) -> ParamStore {
    let mut p = ParamStore::new();
    for (k, v) in entries {
        p.insert(k, v);
    }
    p
}

/// Replaces every parameter by a random draw so zero-initialised gates do
/// not hide gradient errors.
fn randomize(params: &mut ParamStore, scale: f64, rng: &mut Rng) {
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v = scale * rng.normal();
        }
    }
}

type Unary = fn(&mut Graph, NodeId) -> Result<NodeId>;

fn ops(seed: u64, out: &mut Vec<SuiteEntry>) -> Result<()> {
    let mut rng = Rng::new(seed, SUITE_STREAM);
    let pair = |rng: &mut Rng, a: &[usize], b: &[usize]| store(vec![("a", random(a, rng)), ("b", random(b, rng))]);

    let binary: [(&str, &[usize], &[usize], fn(&mut Graph, NodeId, NodeId) -> Result<NodeId>); 8] = [
        ("matmul", &[3, 4], &[4, 2], |g, a, b| g.matmul(a, b)),
        ("matmul_nt", &[3, 4], &[5, 4], |g, a, b| g.matmul_nt(a, b)),
        ("add", &[3, 4], &[3, 4], |g, a, b| g.add(a, b)),
        ("sub", &[3, 4], &[3, 4], |g, a, b| g.sub(a, b)),
        ("mul", &[3, 4], &[3, 4], |g, a, b| g.mul(a, b)),
        ("scale_channels", &[3, 3, 4], &[4], |g, a, b| g.scale_channels(a, b)),
        ("scale_positions", &[3, 3, 4], &[3, 3], |g, a, b| g.scale_positions(a, b)),
        ("add_row_bias", &[5, 3], &[3], |g, a, b| g.add_row_bias(a, b)),
    ];
    for (name, sa, sb, op) in binary {
        let p = pair(&mut rng, sa, sb);
        run(out, name, &p, seed, |g, p| {
            let a = g.param("a", p.get("a")?);
            let b = g.param("b", p.get("b")?);
            let y = op(g, a, b)?;
            projected(g, y, seed)
        })?;
    }

    let unary: [(&str, &[usize], Unary); 7] = [
        ("sigmoid", &[3, 4], |g, x| g.sigmoid(x)),
        ("relu", &[3, 4], |g, x| g.relu(x)),
        ("softmax_rows", &[4, 5], |g, x| g.softmax_rows(x)),
        ("avgpool_spatial", &[3, 4, 2], |g, x| g.avgpool_spatial(x)),
        ("avgpool_channel", &[3, 4, 2], |g, x| g.avgpool_channel(x)),
        ("affine", &[3, 4], |g, x| g.affine(x, -1.5, 0.25)),
        ("mean", &[3, 4], |g, x| g.mean(x)),
    ];
    for (name, shape, op) in unary {
        let p = store(vec![("x", random(shape, &mut rng))]);
        run(out, name, &p, seed, |g, p| {
            let x = g.param("x", p.get("x")?);
            let y = op(g, x)?;
            projected(g, y, seed)
        })?;
    }

    let p = store(vec![
        ("x", random(&[4, 3, 2], &mut rng)),
        ("kernel", random(&[3, 3, 2, 3], &mut rng)),
        ("bias", random(&[3], &mut rng)),
    ]);
    run(out, "conv3x3", &p, seed, |g, p| {
        let x = g.param("x", p.get("x")?);
        let k = g.param("kernel", p.get("kernel")?);
        let b = g.param("bias", p.get("bias")?);
        let y = g.conv3x3(x, k, b)?;
        projected(g, y, seed)
    })?;

    let p = pair(&mut rng, &[2, 3], &[4, 3]);
    run(out, "concat_slice", &p, seed, |g, p| {
        let a = g.param("a", p.get("a")?);
        let b = g.param("b", p.get("b")?);
        let c = g.concat_rows(&[a, b])?;
        let s = g.slice_rows(c, 1, 4)?;
        let r = g.reshape(s, &[2, 6])?;
        projected(g, r, seed)
    })?;
    let p = pair(&mut rng, &[2, 2, 3], &[2, 2, 2]);
    run(out, "concat_last", &p, seed, |g, p| {
        let a = g.param("a", p.get("a")?);
        let b = g.param("b", p.get("b")?);
        let c = g.concat_last(&[a, b])?;
        projected(g, c, seed)
    })
}

fn cit(seed: u64, out: &mut Vec<SuiteEntry>) -> Result<()> {
    let mut cfg = CitConfig::for_grid(2, 2, 4, 2);
    cfg.head_dim = 3;
    cfg.mlp_hidden = 5;
    let block = Cit::new(cfg)?;
    let mut rng = Rng::new(seed, SUITE_STREAM + 2);
    let mut p = ParamStore::new();
    block.init_params(&mut p, &mut rng);
    randomize(&mut p, 0.5, &mut rng);
    p.insert("input.cam", random(&[2, 2, 4], &mut rng));
    p.insert("input.lidar", random(&[2, 2, 4], &mut rng));
    run(out, "cit", &p, seed, |g, p| {
        let cam = g.param("input.cam", p.get("input.cam")?);
        let lidar = g.param("input.lidar", p.get("input.lidar")?);
        let o = block.forward(g, p, cam, lidar)?;
        let both = g.concat_last(&[o.cam, o.lidar])?;
        projected(g, both, seed)
    })
}

fn fusers(seed: u64, out: &mut Vec<SuiteEntry>) -> Result<()> {
    for kind in FuserKind::ALL {
        let fuser = Fuser::new(kind, FusionConfig::new(3))?;
        let mut rng = Rng::new(seed, SUITE_STREAM + 3);
        let mut p = ParamStore::new();
        fuser.init_params(&mut p, &mut rng);
        randomize(&mut p, 0.5, &mut rng);
        p.insert("input.cam", random(&[4, 4, 3], &mut rng));
        p.insert("input.lidar", random(&[4, 4, 3], &mut rng));
        run(out, &format!("fuser_{}", kind.token()), &p, seed, |g, p| {
            let cam = g.param("input.cam", p.get("input.cam")?);
            let lidar = g.param("input.lidar", p.get("input.lidar")?);
            let y = fuser.forward(g, p, cam, lidar)?;
            projected(g, y, seed)
        })?;
    }
    Ok(())
}

fn focal(seed: u64, out: &mut Vec<SuiteEntry>) -> Result<()> {
    let mut rng = Rng::new(seed, SUITE_STREAM + 4);
    let targets = Tensor::from_fn(&[3, 3, 2], |_| if rng.bernoulli(0.4) { 1.0 } else { 0.0 });
    for (label, cfg) in [
        ("focal_default", FocalConfig::default()),
        ("focal_g0", FocalConfig { gamma: 0.0, alpha: None }),
        ("focal_g1_a07", FocalConfig { gamma: 1.0, alpha: Some(0.7) }),
    ] {
        let p = store(vec![("logits", Tensor::from_fn(&[3, 3, 2], |_| 2.0 * rng.normal()))]);
        run(out, label, &p, seed, |g, p| {
            let z = g.param("logits", p.get("logits")?);
            cfg.apply(g, z, &targets)
        })?;
    }
    Ok(())
}

fn head(seed: u64, out: &mut Vec<SuiteEntry>) -> Result<()> {
    let head = SegHead::new(3, 2);
    let mut rng = Rng::new(seed, SUITE_STREAM + 5);
    let mut p = ParamStore::new();
    head.init_params(&mut p, &mut rng);
    randomize(&mut p, 0.5, &mut rng);
    p.insert("input.x", random(&[3, 3, 3], &mut rng));
    let targets = Tensor::from_fn(&[3, 3, 2], |_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 });
    run(out, "head_focal", &p, seed, |g, p| {
        let x = g.param("input.x", p.get("input.x")?);
        let z = head.forward(g, p, x)?;
        FocalConfig::default().apply(g, z, &targets)
    })
}

/// Runs the gradient checks for `component` with inputs drawn from `seed`.
pub fn gradcheck_suite(component: Component, seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    let parts: &[Component] = match component {
        Component::All => &Component::EACH,
        ref c => std::slice::from_ref(c),
    };
    for part in parts {
        match part {
            Component::Ops => ops(seed, &mut out)?,
            Component::Cit => cit(seed, &mut out)?,
            Component::Fusers => fusers(seed, &mut out)?,
            Component::Focal => focal(seed, &mut out)?,
            Component::Head => head(seed, &mut out)?,
            Component::All => unreachable!(),
        }
    }
    Ok(out)
}

pub fn suite_csv(entries: &[SuiteEntry]) -> String {
    let mut s = String::from("check,group,coords,max_rel_err\n");
    for e in entries {
        s.push_str(&format!("{},{},{},{:e}\n", e.check, e.group, e.coords, e.max_rel_err));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn component_tokens_round_trip() {
        for c in Component::EACH.into_iter().chain([Component::All]) {
            assert_eq!(c.to_string().parse::<Component>().unwrap(), c);
        }
        assert!("everything".parse::<Component>().is_err());
    }

    #[test]
    fn ops_suite_passes() {
        let entries = gradcheck_suite(Component::Ops, 1).unwrap();
        assert!(entries.len() > 15);
        for e in &entries {
            assert!(e.max_rel_err < 1e-4, "{e:?}");
        }
    }
}
