/// Exact transportation LP `min ⟨P, M⟩ s.t. P1 = r, Pᵀ1 = c, P ≥ 0`,
/// solved as a min-cost flow by successive shortest paths.
///
/// Arcs row→col have unbounded capacity; reverse residual arcs carry the
/// current flow at negated cost. Paths are found with Bellman-Ford since
/// residual costs can be negative. Returns the plan row-major.
pub fn transport_lp(r: &[f64], c: &[f64], cost: &[f64]) -> Vec<f64> {
    const EPS: f64 = 1e-15;
    let (n, m) = (r.len(), c.len());
    assert_eq!(cost.len(), n * m);
    let mut flow = vec![0.0; n * m];
    let mut supply = r.to_vec();
    let mut demand = c.to_vec();
    // node ids: rows 0..n, cols n..n+m
    let nodes = n + m;
    loop {
        let mut dist = vec![f64::INFINITY; nodes];
        let mut prev = vec![usize::MAX; nodes];
        for i in 0..n {
            if supply[i] > EPS {
                dist[i] = 0.0;
            }
        }
        for _ in 0..nodes {
            let mut changed = false;
            for i in 0..n {
                if dist[i].is_finite() {
                    for j in 0..m {
                        let d = dist[i] + cost[i * m + j];
                        if d < dist[n + j] - 1e-14 {
                            dist[n + j] = d;
                            prev[n + j] = i;
                            changed = true;
                        }
                    }
                }
            }
            for j in 0..m {
                if dist[n + j].is_finite() {
                    for i in 0..n {
                        if flow[i * m + j] > EPS {
                            let d = dist[n + j] - cost[i * m + j];
                            if d < dist[i] - 1e-14 {
                                dist[i] = d;
                                prev[i] = n + j;
                                changed = true;
                            }
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let sink = (0..m)
            .filter(|&j| demand[j] > EPS && dist[n + j].is_finite())
            .min_by(|&a, &b| dist[n + a].total_cmp(&dist[n + b]));
        let Some(sink) = sink else { break };

        // walk back to a source, collecting the bottleneck
        let mut path = Vec::new();
        let mut node = n + sink;
        let mut bottleneck = demand[sink];
        while prev[node] != usize::MAX {
            let p = prev[node];
            if node >= n {
                path.push((p, node - n, 1.0));
            } else {
                bottleneck = bottleneck.min(flow[node * m + (p - n)]);
                path.push((node, p - n, -1.0));
            }
            node = p;
        }
        bottleneck = bottleneck.min(supply[node]);
        if bottleneck <= EPS {
            break;
        }
        for (i, j, dir) in path {
            flow[i * m + j] += dir * bottleneck;
            if flow[i * m + j] < 0.0 {
                flow[i * m + j] = 0.0;
            }
        }
        supply[node] -= bottleneck;
        demand[sink] -= bottleneck;
    }
    flow
}
