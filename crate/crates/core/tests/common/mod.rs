//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use latctl::forest::{Forest, ForestConfig, ForestFile, TreeNode, FOREST_SCHEMA_VERSION};
use latctl::mlp::MlpParams;
use latctl::supervisor::{ControlSource, SupervisorConfig};

/// Mean, (n - 1) standard deviation and count of values beyond two standard
/// deviations, computed in compensated passes with Neumaier summation.
pub fn two_pass_stats(v: &[f64]) -> (f64, f64, usize) {
    let n = v.len() as f64;
    let mean = neumaier(v.iter().copied()) / n;
    if v.len() < 2 {
        return (mean, 0.0, 0);
    }
    // corrected two-pass: the second term cancels rounding left in the mean
    let dev = neumaier(v.iter().map(|x| x - mean));
    let ss = neumaier(v.iter().map(|x| (x - mean) * (x - mean))) - dev * dev / n;
    let var = ss.max(0.0) / (n - 1.0);
    let sd = var.sqrt();
    let odd = if sd > 0.0 {
        v.iter().filter(|x| (*x - mean).abs() > 2.0 * sd).count()
    } else {
        0
    };
    (mean, sd, odd)
}

pub fn neumaier(it: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for x in it {
        let t = s + x;
        c += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
        s = t;
    }
    s + c
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

fn pop_var(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let m = y.iter().sum::<f64>() / n;
    y.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n
}

/// Exhaustive CART split search. Every (feature, midpoint) candidate is
/// scored as `(n_t / n_total) * (var_t - n_l/n_t var_l - n_r/n_t var_r)`;
/// candidates within a relative 1e-10 of the best are ties, won by the lowest
/// feature and then the lowest threshold.
pub fn oracle_tree(rows: &[Vec<f64>], y: &[f64], idx: &[usize], n_total: usize, gate: f64) -> TreeNode {
    let ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
    let n_t = idx.len();
    let leaf = TreeNode::Leaf {
        value: ys.iter().sum::<f64>() / n_t as f64,
        count: n_t,
    };
    if n_t < 2 || ys.iter().all(|v| *v == ys[0]) {
        return leaf;
    }
    let var_t = pop_var(&ys);
    let mut cands: Vec<(usize, f64, f64)> = Vec::new();
    for f in 0..rows[0].len() {
        let mut vals: Vec<f64> = idx.iter().map(|&i| rows[i][f]).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        for w in vals.windows(2) {
            let thr = 0.5 * (w[0] + w[1]);
            let l: Vec<f64> = idx.iter().filter(|&&i| rows[i][f] <= thr).map(|&i| y[i]).collect();
            let r: Vec<f64> = idx.iter().filter(|&&i| rows[i][f] > thr).map(|&i| y[i]).collect();
            let nt = n_t as f64;
            let di = (nt / n_total as f64)
                * (var_t - l.len() as f64 / nt * pop_var(&l) - r.len() as f64 / nt * pop_var(&r));
            cands.push((f, thr, di));
        }
    }
    let Some(best) = cands.iter().map(|c| c.2).reduce(f64::max) else {
        return leaf;
    };
    let (f, thr, di) = cands
        .iter()
        .copied()
        .filter(|c| c.2 >= best - 1e-10 * best.abs())
        .min_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)))
        .unwrap();
    if di < gate {
        return leaf;
    }
    let left: Vec<usize> = idx.iter().copied().filter(|&i| rows[i][f] <= thr).collect();
    let right: Vec<usize> = idx.iter().copied().filter(|&i| rows[i][f] > thr).collect();
    TreeNode::Split {
        feature: f,
        threshold: thr,
        left: Box::new(oracle_tree(rows, y, &left, n_total, gate)),
        right: Box::new(oracle_tree(rows, y, &right, n_total, gate)),
    }
}

/// Structural comparison: splits must match exactly, leaf values within
/// `tol` relative. Returns a description of the first mismatch.
pub fn compare_trees(got: &TreeNode, want: &TreeNode, tol: f64, path: &str) -> Result<(), String> {
    match (got, want) {
        (TreeNode::Leaf { value: a, count: ca }, TreeNode::Leaf { value: b, count: cb }) => {
            if ca != cb || rel_err(*a, *b) > tol {
                return Err(format!("{path}: leaf ({a}, {ca}) vs ({b}, {cb})"));
            }
            Ok(())
        }
        (
            TreeNode::Split { feature: fa, threshold: ta, left: la, right: ra },
            TreeNode::Split { feature: fb, threshold: tb, left: lb, right: rb },
        ) => {
            if fa != fb || ta != tb {
                return Err(format!("{path}: split ({fa}, {ta}) vs ({fb}, {tb})"));
            }
            compare_trees(la, lb, tol, &format!("{path}L"))?;
            compare_trees(ra, rb, tol, &format!("{path}R"))
        }
        _ => Err(format!("{path}: node kind differs: {got:?} vs {want:?}")),
    }
}

/// Forest whose tree `i` returns `outputs[k][i]` for the one-feature input `[k]`.
pub fn scripted_forest(outputs: &[Vec<f64>]) -> Forest {
    let n_trees = outputs[0].len();
    let trees = (0..n_trees)
        .map(|i| {
            let mut node = TreeNode::Leaf {
                value: outputs[outputs.len() - 1][i],
                count: 1,
            };
            for k in (0..outputs.len() - 1).rev() {
                node = TreeNode::Split {
                    feature: 0,
                    threshold: k as f64 + 0.5,
                    left: Box::new(TreeNode::Leaf {
                        value: outputs[k][i],
                        count: 1,
                    }),
                    right: Box::new(node),
                };
            }
            node
        })
        .collect();
    ForestFile {
        schema_version: FOREST_SCHEMA_VERSION,
        kind: "random_forest_regressor".into(),
        impurity_weighting: "node_fraction".into(),
        config: ForestConfig {
            n_trees,
            ..ForestConfig::default()
        },
        beam_count: 1,
        dataset_hash: String::new(),
        dataset: None,
        trees,
    }
    .into_forest()
    .expect("scripted forest is valid")
}

/// Twenty tree outputs with the given CoV (eps 0.01) and exactly one tree
/// beyond two standard deviations; `cov == 0` gives identical outputs.
pub fn outputs_with_cov(cov: f64) -> Vec<f64> {
    if cov == 0.0 {
        return vec![0.25; 20];
    }
    // 19 trees at b and one at b + 1: std = sqrt(0.05), mean = b + 0.05
    let sd = 0.05f64.sqrt();
    let b = sd / cov - 0.05 - 0.01;
    let mut v = vec![b; 19];
    v.push(b + 1.0);
    v
}

/// Reference hysteresis automaton, written from the behavioral description:
/// leave learned control when `cov > cov_on`; once in fallback, stay for at
/// least `min_fallback_steps` steps and until `cov < cov_off`.
pub fn oracle_sources(covs: &[f64], cfg: &SupervisorConfig, human: &[bool]) -> Vec<ControlSource> {
    let mut out = Vec::with_capacity(covs.len());
    let mut fallback_since: Option<usize> = None;
    for (k, &c) in covs.iter().enumerate() {
        fallback_since = match fallback_since {
            Some(start) if (k - start) as u64 >= cfg.min_fallback_steps && c < cfg.cov_off => None,
            Some(start) => Some(start),
            None if c > cfg.cov_on => Some(k),
            None => None,
        };
        out.push(if human.get(k).copied().unwrap_or(false) {
            ControlSource::HumanOverride
        } else if fallback_since.is_some() {
            ControlSource::FallbackPid
        } else {
            ControlSource::Learned
        });
    }
    out
}

/// Forward pass written with plain loops. Returns the output and the
/// smallest absolute hidden pre-activation.
pub fn oracle_forward(p: &MlpParams, x: &[f64]) -> (f64, f64) {
    let mut a = x.to_vec();
    let mut min_pre = f64::INFINITY;
    let last = p.layers.len() - 1;
    for (li, l) in p.layers.iter().enumerate() {
        let (rows, cols) = l.w.dim();
        let mut z = vec![0.0; rows];
        for r in 0..rows {
            let mut s = l.b[r];
            for c in 0..cols {
                s += l.w[[r, c]] * a[c];
            }
            z[r] = s;
        }
        if li < last {
            for v in z.iter_mut() {
                min_pre = min_pre.min(v.abs());
                *v = v.max(0.0);
            }
        }
        a = z;
    }
    (a[0], min_pre)
}

pub fn oracle_mse(p: &MlpParams, xs: &[Vec<f64>], ys: &[f64]) -> f64 {
    xs.iter()
        .zip(ys)
        .map(|(x, y)| {
            let e = oracle_forward(p, x).0 - y;
            e * e
        })
        .sum::<f64>()
        / ys.len() as f64
}

/// Largest relative error between the analytic gradient and central finite
/// differences of [`oracle_mse`], with the denominator floored at `floor`.
pub fn max_grad_rel_err(p: &MlpParams, xs: &[Vec<f64>], ys: &[f64], analytic: &[f64], h: f64, floor: f64) -> f64 {
    let base = p.flatten();
    let mut probe = p.clone();
    let mut worst = 0.0f64;
    for (j, &g) in analytic.iter().enumerate() {
        let mut plus = base.clone();
        plus[j] += h;
        probe.set_flat(&plus);
        let lp = oracle_mse(&probe, xs, ys);
        let mut minus = base.clone();
        minus[j] -= h;
        probe.set_flat(&minus);
        let lm = oracle_mse(&probe, xs, ys);
        let fd = (lp - lm) / (2.0 * h);
        let err = (g - fd).abs() / g.abs().max(fd.abs()).max(floor);
        worst = worst.max(err);
    }
    worst
}

pub type Client = tungstenite::WebSocket<tungstenite::stream::MaybeTlsStream<std::net::TcpStream>>;

pub fn connect(addr: std::net::SocketAddr) -> Client {
    let (ws, _) = tungstenite::connect(format!("ws://{addr}")).expect("websocket handshake");
    ws
}

/// Next server message, or `None` once the connection is closed.
pub fn next_message(ws: &mut Client) -> Option<latctl::telemetry::ServerMessage> {
    loop {
        match ws.read() {
            Ok(tungstenite::Message::Text(t)) => {
                return Some(serde_json::from_str(&t).expect("server sends valid messages"))
            }
            Ok(tungstenite::Message::Close(_)) | Err(_) => return None,
            Ok(_) => {}
        }
    }
}

pub fn send(ws: &mut Client, text: &str) {
    ws.send(tungstenite::Message::text(text)).expect("send");
}
