//! Planted-truth instances for exercising the correction loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::exec::policy::{MockChoice, MockProblemScript, MockScript};
use crate::exec::sandbox::{StubRule, StubTable};
use crate::exec::{Problem, TestCase, TestMode, TestStatus};
use crate::meta_correction::{MetaDataset, MetaRow, NoisyDataset, NoisyRow, RewardKey};
use crate::reward_model::{dot, sigmoid, FeatureVector, PrmParams};

#[derive(Debug, Clone)]
pub struct PlantedSpec {
    pub dim: usize,
    pub noisy_rows: usize,
    pub meta_rows: usize,
    /// Fraction of noisy rewards that get corrupted.
    pub corrupt_fraction: f64,
    /// Corruption is uniform on [-magnitude, magnitude], then clamped.
    pub noise_magnitude: f64,
    /// Planted weights have norm `planted_scale * sqrt(dim)`.
    pub planted_scale: f64,
    /// Standard deviation of each non-bias feature.
    pub feature_scale: f64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        Self { dim: 16, noisy_rows: 64, meta_rows: 64, corrupt_fraction: 0.3, noise_magnitude: 0.4, planted_scale: 1.0, feature_scale: 3.0 }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedInstance {
    pub planted: PrmParams,
    pub noisy: NoisyDataset,
    pub meta: MetaDataset,
    /// Planted-scorer reward for each noisy row, aligned with `noisy.rows`.
    pub truth: Vec<f64>,
    pub corrupted: Vec<bool>,
}

fn random_features(dim: usize, scale: f64, rng: &mut ChaCha8Rng) -> FeatureVector {
    let mut values = Vec::with_capacity(dim);
    values.push(1.0);
    for _ in 1..dim {
        let z: f64 = StandardNormal.sample(rng);
        values.push(z * scale / ((dim - 1) as f64).sqrt());
    }
    FeatureVector::new(values)
}

pub fn planted_instance(spec: &PlantedSpec, seed: u64) -> PlantedInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..spec.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = dot(&raw, &raw).sqrt();
    let planted = PrmParams { weights: raw.iter().map(|w| w / norm * spec.planted_scale * (spec.dim as f64).sqrt()).collect() };

    let mut rows = Vec::with_capacity(spec.noisy_rows);
    let mut truth = Vec::with_capacity(spec.noisy_rows);
    let mut corrupted = Vec::with_capacity(spec.noisy_rows);
    for i in 0..spec.noisy_rows {
        let features = random_features(spec.dim, spec.feature_scale, &mut rng);
        let r = sigmoid(dot(&planted.weights, &features.values));
        let hit = rng.random::<f64>() < spec.corrupt_fraction;
        let base = if hit {
            let noise = rng.random_range(-spec.noise_magnitude..=spec.noise_magnitude);
            (r + noise).clamp(0.0, 1.0)
        } else {
            r
        };
        rows.push(NoisyRow { key: RewardKey::new(format!("syn{}", i / 4), format!("syn{}-t", i / 4), i % 4 + 1), features, base });
        truth.push(r);
        corrupted.push(hit);
    }
    let meta_rows = (0..spec.meta_rows)
        .map(|_| {
            let features = random_features(spec.dim, spec.feature_scale, &mut rng);
            let reward = sigmoid(dot(&planted.weights, &features.values));
            MetaRow { features, reward }
        })
        .collect();
    PlantedInstance {
        planted,
        noisy: NoisyDataset::new(rows).expect("unique keys"),
        meta: MetaDataset::new(meta_rows).expect("rewards in range"),
        truth,
        corrupted,
    }
}

// ---------------------------------------------------------------------------
// Planted Best-of-N suite
// ---------------------------------------------------------------------------

/// Identifiers whose presence makes the stub sandbox fail a program.
pub const BUG_MARKERS: [(&str, TestStatus); 4] = [
    ("skip_head", TestStatus::Fail),
    ("off_by_one", TestStatus::Fail),
    ("early_stop", TestStatus::Timeout),
    ("drop_last", TestStatus::Fail),
];

/// Problems, a mock policy script and a stub outcome table in which each
/// candidate's pass/fail status is decided by which helper it uses.
#[derive(Debug, Clone)]
pub struct MockSuite {
    pub problems: Vec<Problem>,
    pub script: MockScript,
    pub stub: StubTable,
    /// `passes[p][j]`: candidate `j` of problem `p` passes.
    pub passes: Vec<Vec<bool>>,
}

struct Task {
    name: &'static str,
    desc: &'static str,
    agg: fn(&str) -> String,
    eval: fn(&[i64]) -> i64,
}

const TASKS: [Task; 5] = [
    Task { name: "sum", desc: "sum", agg: |x| format!("sum({x})"), eval: |v| v.iter().sum() },
    Task { name: "max", desc: "largest value", agg: |x| format!("max({x})"), eval: |v| *v.iter().max().unwrap() },
    Task { name: "min", desc: "smallest value", agg: |x| format!("min({x})"), eval: |v| *v.iter().min().unwrap() },
    Task {
        name: "count_even",
        desc: "number of even values",
        agg: |x| format!("sum(1 for v in {x} if v % 2 == 0)"),
        eval: |v| v.iter().filter(|x| *x % 2 == 0).count() as i64,
    },
    Task {
        name: "sum_squares",
        desc: "sum of squares",
        agg: |x| format!("sum(v * v for v in {x})"),
        eval: |v| v.iter().map(|x| x * x).sum(),
    },
];

fn helper_body(task: &Task, clean: bool, variant: usize) -> (String, String) {
    let agg = task.agg;
    match (clean, variant % 3) {
        (true, 0) => (format!("Return the {} of the values directly.", task.desc), format!("return {}", agg("values"))),
        (true, 1) => (
            format!("Compute the {} into a named result, then return it.", task.desc),
            format!("result = {}\n    return result", agg("values")),
        ),
        (true, _) => (
            format!("Copy the values and return their {}.", task.desc),
            format!("items = list(values)\n    return {}", agg("items")),
        ),
        (false, 0) => (
            format!("Return the {} of the values after the first.", task.desc),
            format!("skip_head = values[1:]\n    return {}", agg("skip_head")),
        ),
        (false, 1) => (
            format!("Return the {} adjusted by one.", task.desc),
            format!("off_by_one = {} + 1\n    return off_by_one", agg("values")),
        ),
        (false, _) => (
            format!("Return the {} of the first half of the values.", task.desc),
            format!("early_stop = values[:len(values) // 2]\n    return {}", agg("early_stop")),
        ),
    }
}

fn candidate_program(task: &Task, clean: bool, variant: usize) -> String {
    let (doc, body) = helper_body(task, clean, variant);
    format!(
        "import sys\n\n\ndef main():\n    \"\"\"\n    Read the integers and print their {desc}.\n    \"\"\"\n    values = read_values()\n    print(solve_{name}(values))\n\n\ndef solve_{name}(values):\n    \"\"\"\n    {doc}\n    \"\"\"\n    {body}\n\n\n{reader}\n\n\nif __name__ == \"__main__\":\n    main()\n",
        desc = task.desc,
        name = task.name,
        reader = reader_step(false, 0),
    )
}

fn reader_step(buggy: bool, variant: usize) -> String {
    let head = "def read_values():\n    \"\"\"\n    Parse all integers from standard input.\n    \"\"\"\n";
    match (buggy, variant % 2) {
        (false, 0) => format!("{head}    return [int(x) for x in sys.stdin.read().split()]"),
        (false, _) => format!("{head}    data = sys.stdin.read().split()\n    return list(map(int, data))"),
        (true, _) => format!("{head}    data = sys.stdin.read().split()\n    drop_last = data[:-1]\n    return [int(x) for x in drop_last]"),
    }
}

/// Builds `n_problems` problems with `n_candidates` scripted candidates
/// each. Every candidate is independently clean with probability one half,
/// and each problem gets at least one clean candidate. Completion tails are
/// picked by hashed seed, a quarter of them buggy.
pub fn mock_suite(n_problems: usize, n_candidates: usize, seed: u64) -> MockSuite {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let difficulties = ["easy", "medium", "hard"];
    let mut problems = Vec::with_capacity(n_problems);
    let mut script_problems = std::collections::BTreeMap::new();
    let mut passes = Vec::with_capacity(n_problems);
    for p in 0..n_problems {
        let task = &TASKS[p % TASKS.len()];
        let problem_id = format!("mock-{p:03}");
        let values: Vec<i64> = (0..6).map(|_| rng.random_range(-9..=9)).collect();
        let input = values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ") + "\n";
        problems.push(Problem {
            problem_id: problem_id.clone(),
            statement: format!("Problem {p}. Read a list of integers from standard input and print their {}.", task.desc),
            difficulty: Some(difficulties[p % difficulties.len()].to_string()),
            tests: vec![TestCase {
                id: "t1".into(),
                mode: TestMode::StdinStdout,
                input,
                expected_output: Some((task.eval)(&values).to_string()),
                time_limit_ms: 2000,
            }],
        });
        let mut clean: Vec<bool> = (0..n_candidates).map(|_| rng.random::<bool>()).collect();
        if !clean.iter().any(|&c| c) {
            let j = rng.random_range(0..n_candidates);
            clean[j] = true;
        }
        let candidates = clean.iter().map(|&c| candidate_program(task, c, rng.random_range(0..3))).collect();
        let tails = (0..8).map(|i| reader_step(i % 4 == 3, i) + "\n\n\nif __name__ == \"__main__\":\n    main()\n").collect();
        script_problems.insert(problem_id, MockProblemScript { candidates, tails });
        passes.push(clean);
    }
    let stub = StubTable {
        schema_version: crate::SCHEMA_VERSION,
        exact: Vec::new(),
        rules: BUG_MARKERS.iter().map(|&(m, status)| StubRule { contains: m.to_string(), status }).collect(),
        default: TestStatus::Pass,
    };
    MockSuite {
        problems,
        script: MockScript { choice: MockChoice::SeedMod, tail_choice: MockChoice::Hashed, problems: script_problems },
        stub,
        passes,
    }
}
