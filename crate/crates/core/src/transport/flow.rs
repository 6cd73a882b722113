//! Min-cost transportation by successive shortest paths.
//!
//! The network is the complete bipartite graph from supply nodes `0..n` to
//! demand nodes `0..m` with uncapacitated arcs. Node potentials keep reduced
//! costs nonnegative so every shortest-path search is a Dijkstra run; with
//! integer supplies every augmentation is integral.

pub(crate) struct TransportPlan {
    /// Row-major `n x m` integer flows.
    pub flow: Vec<u64>,
    /// `sum flow_ij * cost_ij`.
    pub cost: f64,
}

const UNREACHED: usize = usize::MAX;

/// `cost` is row-major `n x m`; `supply` and `demand` have equal totals.
pub(crate) fn min_cost_transport(cost: &[f64], supply: &[u64], demand: &[u64]) -> TransportPlan {
    let n = supply.len();
    let m = demand.len();
    debug_assert_eq!(cost.len(), n * m);
    debug_assert_eq!(supply.iter().sum::<u64>(), demand.iter().sum::<u64>());

    let mut flow = vec![0u64; n * m];
    let mut rem_supply = supply.to_vec();
    let mut rem_demand = demand.to_vec();
    // potentials: supply nodes 0..n, demand nodes n..n+m
    let mut pot = vec![0.0f64; n + m];
    let mut dist = vec![f64::INFINITY; n + m];
    let mut done = vec![false; n + m];
    let mut parent = vec![UNREACHED; n + m];

    while rem_supply.iter().any(|&s| s > 0) {
        dist.fill(f64::INFINITY);
        done.fill(false);
        parent.fill(UNREACHED);
        for i in 0..n {
            if rem_supply[i] > 0 {
                dist[i] = 0.0;
            }
        }

        let mut target = UNREACHED;
        loop {
            // dense selection of the closest unsettled node
            let mut u = UNREACHED;
            let mut best = f64::INFINITY;
            for (k, (&dk, &fin)) in dist.iter().zip(&done).enumerate() {
                if !fin && dk < best {
                    best = dk;
                    u = k;
                }
            }
            if u == UNREACHED {
                break;
            }
            done[u] = true;
            if u >= n && rem_demand[u - n] > 0 {
                target = u;
                break;
            }
            if u < n {
                let row = &cost[u * m..(u + 1) * m];
                for j in 0..m {
                    let v = n + j;
                    if done[v] {
                        continue;
                    }
                    let reduced = (row[j] + pot[u] - pot[v]).max(0.0);
                    let cand = dist[u] + reduced;
                    if cand < dist[v] {
                        dist[v] = cand;
                        parent[v] = u;
                    }
                }
            } else {
                // residual backward arcs demand j -> supply i carry existing flow
                let j = u - n;
                for i in 0..n {
                    if done[i] || flow[i * m + j] == 0 {
                        continue;
                    }
                    let reduced = (-cost[i * m + j] + pot[u] - pot[i]).max(0.0);
                    let cand = dist[u] + reduced;
                    if cand < dist[i] {
                        dist[i] = cand;
                        parent[i] = u;
                    }
                }
            }
        }
        assert!(target != UNREACHED, "balanced transport always has an augmenting path");

        let reach = dist[target];
        for k in 0..n + m {
            pot[k] += dist[k].min(reach);
        }

        // bottleneck along the path back to a source
        let mut amount = rem_demand[target - n];
        let mut v = target;
        while parent[v] != UNREACHED {
            let u = parent[v];
            if u >= n {
                // v is a supply node reached backwards along arc (v, u - n)
                amount = amount.min(flow[v * m + (u - n)]);
            }
            v = u;
        }
        amount = amount.min(rem_supply[v]);
        let source = v;

        let mut v = target;
        while parent[v] != UNREACHED {
            let u = parent[v];
            if u < n {
                flow[u * m + (v - n)] += amount;
            } else {
                flow[v * m + (u - n)] -= amount;
            }
            v = u;
        }
        rem_supply[source] -= amount;
        rem_demand[target - n] -= amount;
    }

    let cost_total = flow
        .iter()
        .zip(cost)
        .filter(|(f, _)| **f > 0)
        .map(|(&f, &c)| f as f64 * c)
        .sum();
    TransportPlan {
        flow,
        cost: cost_total,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn marginals_are_respected() {
        let cost = vec![1.0, 4.0, 2.0, 3.0, 0.5, 2.5];
        let supply = [3, 4];
        let demand = [2, 2, 3];
        let plan = min_cost_transport(&cost, &supply, &demand);
        for i in 0..2 {
            assert_eq!(plan.flow[i * 3..(i + 1) * 3].iter().sum::<u64>(), supply[i]);
        }
        for j in 0..3 {
            assert_eq!(plan.flow[j] + plan.flow[3 + j], demand[j]);
        }
    }

    #[test]
    fn rerouting_through_backward_arcs() {
        // greedy would send source 0 to sink 0; the optimum swaps
        let cost = vec![1.0, 2.0, 1.0, 100.0];
        let plan = min_cost_transport(&cost, &[1, 1], &[1, 1]);
        assert_eq!(plan.flow, vec![0, 1, 1, 0]);
        assert_eq!(plan.cost, 3.0);
    }

    #[test]
    fn hand_checked_three_by_three() {
        // assignment: rows pick columns 1, 0, 2 for cost 2 + 3 + 1 = 6
        let cost = vec![4.0, 2.0, 8.0, 3.0, 7.0, 9.0, 5.0, 6.0, 1.0];
        let plan = min_cost_transport(&cost, &[1, 1, 1], &[1, 1, 1]);
        assert_eq!(plan.cost, 6.0);
    }
}
