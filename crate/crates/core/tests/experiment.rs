use std::fs;
use std::path::Path;

use fedalign::experiment::*;

fn config(out: &Path, extra: &str) -> ExperimentConfig {
    let text = format!(
        "strategies = SP, FedAVG, FedProx, FedAlign, FedAVG-L, FedProx-L, FedAlign-L\n\
         seeds = 0, 1, 2\nn_clients = 3\nnum_bases = 6\nd0 = 8\ne_global = 4\ne_local = 2\n\
         output = {}\n{extra}\n[synthetic]\nnodes = 200\n",
        out.display()
    );
    ExperimentConfig::parse(&text).unwrap()
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(f)
}

#[test]
fn full_grid_of_settings_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = config(&tmp.path().join("a"), "");
    let b = config(&tmp.path().join("b"), "");
    let summary = in_pool(1, || run_experiment(&a).unwrap());
    in_pool(4, || run_experiment(&b).unwrap());

    assert_eq!(summary.runs.len(), 21);
    let rows = fs::read_to_string(tmp.path().join("a/summary.csv")).unwrap();
    assert_eq!(rows.lines().next().unwrap(), SUMMARY_CSV_HEADER);
    assert_eq!(rows.lines().count(), 1 + 21);
    assert_eq!(fs::read_dir(tmp.path().join("a/rounds")).unwrap().count(), 21);

    let ta = read_tree(&tmp.path().join("a"));
    let tb = read_tree(&tmp.path().join("b"));
    assert_eq!(ta.len(), tb.len());
    for ((na, ba), (nb, bb)) in ta.iter().zip(&tb) {
        assert_eq!(na, nb);
        if na == "effective.cfg" {
            continue; // differs only in the output line
        }
        assert!(ba == bb, "{na} differs between thread counts");
    }

    let table = summary.table();
    let order: Vec<usize> = ["SP", "FedAVG", "FedProx", "FedAlign", "FedAVG-L", "FedProx-L", "FedAlign-L"]
        .iter()
        .map(|n| table.find(&format!("| {n} |")).unwrap())
        .collect();
    assert!(order.windows(2).all(|w| w[0] < w[1]), "{table}");
}

#[test]
fn wall_time_is_opt_in() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path(), "strategies = FedAVG\nseeds = 0\ne_global = 1");
    cfg.record_wall_time = true;
    run_experiment(&cfg).unwrap();
    let rows = fs::read_to_string(tmp.path().join("summary.csv")).unwrap();
    let ms = rows.lines().nth(1).unwrap().rsplit(',').next().unwrap();
    assert!(ms.parse::<f64>().unwrap() > 0.0);
    let rounds = fs::read_to_string(tmp.path().join("rounds/FedAVG_seed0.csv")).unwrap();
    assert!(rounds.lines().filter(|l| l.contains(",-1,")).all(|l| !l.ends_with(',')));
}

#[test]
fn grid_search_selects_and_reproduces() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "strategies = FedAVG, FedProx\nseeds = 0");
    let one = grid_search(&cfg, &parse_grid("alpha = 0.1\n").unwrap()).unwrap();
    assert_eq!(one.points.len(), 1);
    assert!(one.best.iter().all(|b| b.point == 0));

    let grid = parse_grid("alpha = 0.01, 0.1\nmu = 1, 10\n").unwrap();
    let first = grid_search(&cfg, &grid).unwrap();
    assert_eq!(first.points.len(), 4);
    for b in &first.best {
        let accs: Vec<f64> = first.points.iter().map(|p| p.summary.strategy(&b.strategy).unwrap().mean_acc).collect();
        assert_eq!(b.mean_acc, accs.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    }
    let csv = fs::read_to_string(tmp.path().join("grid.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 * 2);
    let again = grid_search(&cfg, &grid).unwrap();
    assert_eq!(first.best, again.best);

    assert!(grid_search(&cfg, &Vec::new()).is_err());
    assert!(grid_search(&cfg, &parse_grid("nonsense = 1\n").unwrap()).unwrap_err().is_config());
}

#[test]
fn strategy_sections_override_globals() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "mu = 3\n[FedProx]\nmu = 0.5\ne_local = 7\n");
    assert_eq!(cfg.strategy("FedProx").unwrap().mu, 0.5);
    assert_eq!(cfg.strategy("FedProx").unwrap().e_local, 7);
    assert_eq!(cfg.strategy("FedProx-L").unwrap().mu, 3.0);
    assert_eq!(cfg.strategy("FedAlign").unwrap().e_local, 2);
    assert_eq!(ExperimentConfig::parse(&cfg.serialize()).unwrap(), cfg);
}
