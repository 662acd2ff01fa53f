//! Maximum spanning arborescence over dense arc scores (Chu-Liu/Edmonds),
//! plus a single-root variant matching dependency-tree conventions.
//!
//! Nodes are 0..=n with 0 the virtual root; `score(head, dep)` weights the
//! arc head -> dep. Results map token d (1-based) to its chosen head.

const NEG: f64 = f64::NEG_INFINITY;

fn build_matrix(n: usize, score: &dyn Fn(usize, usize) -> f64) -> Vec<Vec<f64>> {
    let m = n + 1;
    let mut w = vec![vec![NEG; m]; m];
    for d in 1..m {
        for h in 0..m {
            if h != d {
                w[h][d] = score(h, d);
            }
        }
    }
    w
}

fn greedy_heads(w: &[Vec<f64>]) -> Vec<usize> {
    let m = w.len();
    let mut par = vec![0usize; m];
    for d in 1..m {
        let mut best = NEG;
        let mut bh = 0usize;
        for h in 0..m {
            if h != d && w[h][d] > best {
                best = w[h][d];
                bh = h;
            }
        }
        par[d] = bh;
    }
    par
}

fn find_cycle(par: &[usize]) -> Option<Vec<usize>> {
    let m = par.len();
    let mut color = vec![0u8; m];
    for s in 1..m {
        if color[s] != 0 {
            continue;
        }
        let mut path = Vec::new();
        let mut v = s;
        while v != 0 && color[v] == 0 {
            color[v] = 1;
            path.push(v);
            v = par[v];
        }
        let hit_open = v != 0 && color[v] == 1;
        if hit_open {
            let pos = path.iter().position(|&x| x == v).unwrap();
            let cycle = path[pos..].to_vec();
            for &p in &path {
                color[p] = 2;
            }
            return Some(cycle);
        }
        for &p in &path {
            color[p] = 2;
        }
    }
    None
}

/// Recursive contraction. `w` is a complete matrix over the current node
/// set (index 0 = root); returns the chosen head per node.
fn solve(w: &Vec<Vec<f64>>) -> Vec<usize> {
    let m = w.len();
    let par = greedy_heads(w);
    let cycle = match find_cycle(&par) {
        None => return par,
        Some(c) => c,
    };
    let mut in_cycle = vec![false; m];
    for &v in &cycle {
        in_cycle[v] = true;
    }
    let cycle_weight: f64 = cycle.iter().map(|&v| w[par[v]][v]).sum();
    let kept: Vec<usize> = (0..m).filter(|&v| !in_cycle[v]).collect();
    let k = kept.len();
    let mut new_idx = vec![usize::MAX; m];
    for (i, &v) in kept.iter().enumerate() {
        new_idx[v] = i;
    }
    // contracted node takes index k in the reduced problem
    let mut nw = vec![vec![NEG; k + 1]; k + 1];
    let mut enter_choice = vec![usize::MAX; m];
    let mut leave_choice = vec![usize::MAX; m];
    for &h in &kept {
        let mut best = NEG;
        let mut bv = usize::MAX;
        for &v in &cycle {
            if w[h][v] == NEG {
                continue;
            }
            let gain = w[h][v] - w[par[v]][v];
            if gain > best {
                best = gain;
                bv = v;
            }
        }
        if bv != usize::MAX {
            nw[new_idx[h]][k] = cycle_weight + best;
            enter_choice[h] = bv;
        }
    }
    for &d in &kept {
        if d == 0 {
            continue;
        }
        let mut best = NEG;
        let mut bu = usize::MAX;
        for &u in &cycle {
            if w[u][d] > best {
                best = w[u][d];
                bu = u;
            }
        }
        if bu != usize::MAX {
            nw[k][new_idx[d]] = best;
            leave_choice[d] = bu;
        }
        for &h in &kept {
            if h != d {
                nw[new_idx[h]][new_idx[d]] = w[h][d];
            }
        }
    }
    let npar = solve(&nw);
    let mut out = vec![0usize; m];
    for (ni, &d) in kept.iter().enumerate() {
        if d == 0 {
            continue;
        }
        out[d] = if npar[ni] == k { leave_choice[d] } else { kept[npar[ni]] };
    }
    let entering = kept[npar[k]];
    let broken = enter_choice[entering];
    for &v in &cycle {
        out[v] = if v == broken { entering } else { par[v] };
    }
    out
}

/// Best arborescence with no constraint on how many tokens attach to the
/// root. Requires n >= 1; heads[i] is the head of token i + 1.
pub fn max_arborescence(n: usize, score: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    assert!(n >= 1, "arborescence needs at least one token");
    let w = build_matrix(n, &score);
    let par = solve(&w);
    par[1..].to_vec()
}

pub fn arborescence_score(n: usize, score: impl Fn(usize, usize) -> f64, heads: &[usize]) -> f64 {
    (1..=n).map(|d| score(heads[d - 1], d)).sum()
}

/// Best arborescence in which exactly one token attaches to the root. When
/// the unconstrained optimum already has a single root attachment it is
/// returned as is; otherwise every candidate root token is tried with the
/// other root arcs suppressed and the best total wins.
pub fn max_single_root_arborescence(n: usize, score: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    assert!(n >= 1, "arborescence needs at least one token");
    let w = build_matrix(n, &score);
    let par = solve(&w);
    let roots = par[1..].iter().filter(|&&h| h == 0).count();
    if roots == 1 {
        return par[1..].to_vec();
    }
    let mut best_total = NEG;
    let mut best: Vec<usize> = Vec::new();
    for t in 1..=n {
        let mut wt = w.clone();
        for d in 1..=n {
            if d != t {
                wt[0][d] = NEG;
            }
        }
        let cand = solve(&wt);
        let total: f64 = (1..=n).map(|d| w[cand[d]][d]).sum();
        if total > best_total {
            best_total = total;
            best = cand[1..].to_vec();
        }
    }
    best
}
