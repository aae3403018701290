//! Function-preserving network transforms.
//!
//! *Widening* a hidden layer appends replicas of randomly chosen existing
//! units: a replica copies its source unit's incoming weights and bias, and
//! every outgoing weight of a unit with `r` copies (itself included) is divided
//! by `r`. The next layer therefore receives exactly the same pre-activations.
//!
//! *Deepening* inserts an identity-initialized layer with the same activation.
//! This preserves the function when the activation is idempotent on its own
//! range (relu, identity). For sigmoid it only preserves shapes.
//!
//! Hidden layer indices are 1-based throughout, matching plan files.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Uniform;
use serde::{Deserialize, Serialize};

use crate::nn::{Layer, Network};
use crate::{Error, Result};

/// Unit-replication map for widening a layer from `n_old` to `n_new` units.
///
/// Indices are 0-based: `map[j] = j` for `j < n_old`, and `map[j]` for
/// `j ≥ n_old` names the original unit that new unit `j` replicates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RandomMapping {
    pub n_old: usize,
    pub n_new: usize,
    pub map: Vec<usize>,
    /// `repetition[k]` counts the units (original included) that carry unit `k`.
    pub repetition: Vec<usize>,
}

pub fn random_mapping(n_old: usize, n_new: usize, seed: u64) -> Result<RandomMapping> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    mapping_with(n_old, n_new, &mut rng)
}

fn mapping_with(n_old: usize, n_new: usize, rng: &mut ChaCha8Rng) -> Result<RandomMapping> {
    if n_old == 0 {
        return Err(Error::InvalidPlan("cannot widen an empty layer".into()));
    }
    if n_new < n_old {
        return Err(Error::InvalidPlan(format!("narrowing {n_old} -> {n_new} is not supported")));
    }
    let mut map: Vec<usize> = (0..n_old).collect();
    if n_new > n_old {
        let pick = Uniform::new(0, n_old).expect("n_old > 0");
        map.extend((n_old..n_new).map(|_| rng.sample(pick)));
    }
    let mut repetition = vec![0usize; n_old];
    for &k in &map {
        repetition[k] += 1;
    }
    Ok(RandomMapping {
        n_old,
        n_new,
        map,
        repetition,
    })
}

fn check_hidden_index(net: &Network, layer: usize) -> Result<()> {
    let n = net.hidden().len();
    if layer == 0 || layer > n {
        return Err(Error::Shape(format!("hidden layer {layer} out of range 1..={n}")));
    }
    Ok(())
}

/// Widens hidden layer `layer` (1-based) to `new_width` units.
///
/// With `noise_eps > 0`, replicated incoming weights get i.i.d. uniform noise
/// in `[−noise_eps, noise_eps]`, which breaks replica symmetry at the cost of
/// exact preservation.
pub fn widen(net: &Network, layer: usize, new_width: usize, noise_eps: f64, seed: u64) -> Result<Network> {
    check_hidden_index(net, layer)?;
    if !(noise_eps >= 0.0 && noise_eps.is_finite()) {
        return Err(Error::Config(format!("noise_eps must be non-negative, got {noise_eps}")));
    }
    let l = layer - 1;
    let old = &net.hidden()[l];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mapping = mapping_with(old.n_out(), new_width, &mut rng)?;
    if mapping.n_new == mapping.n_old {
        return Ok(net.clone());
    }

    let widened_in = old.weights.select(Axis(0), &mapping.map);
    let mut incoming = widened_in;
    if noise_eps > 0.0 {
        let noise = Uniform::new_inclusive(-noise_eps, noise_eps).expect("finite bounds");
        for mut row in incoming.rows_mut().into_iter().skip(mapping.n_old) {
            row.mapv_inplace(|w| w + rng.sample(noise));
        }
    }
    let bias: Array1<f64> = mapping.map.iter().map(|&k| old.bias[k]).collect();
    let new_layer = Layer {
        weights: incoming,
        bias,
        activation: old.activation,
    };

    let (input_dim, mut hidden, mut classifier) = net.clone().into_parts();
    hidden[l] = new_layer;
    let next = if l + 1 < hidden.len() {
        &mut hidden[l + 1]
    } else {
        &mut classifier
    };
    next.weights = split_outgoing(&next.weights, &mapping);
    Network::new(input_dim, hidden, classifier)
}

/// Column `j` of the result is column `map[j]` of `outgoing` divided by that
/// unit's repetition count.
fn split_outgoing(outgoing: &Array2<f64>, mapping: &RandomMapping) -> Array2<f64> {
    let mut w = outgoing.select(Axis(1), &mapping.map);
    for (j, mut col) in w.columns_mut().into_iter().enumerate() {
        let r = mapping.repetition[mapping.map[j]] as f64;
        col /= r;
    }
    w
}

/// Inserts an identity layer directly after hidden layer `after` (1-based).
pub fn deepen(net: &Network, after: usize) -> Result<Network> {
    check_hidden_index(net, after)?;
    let (input_dim, mut hidden, classifier) = net.clone().into_parts();
    let prev = &hidden[after - 1];
    let width = prev.n_out();
    let inserted = Layer {
        weights: Array2::eye(width),
        bias: Array1::zeros(width),
        activation: prev.activation,
    };
    hidden.insert(after, inserted);
    Network::new(input_dim, hidden, classifier)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Step {
    Deepen { after: usize },
    Widen { layer: usize, width: usize },
}

/// Ordered widen/deepen steps, serialized as
/// `{"steps":[{"op":"deepen","after":2},{"op":"widen","layer":2,"width":50}]}`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformPlan {
    pub steps: Vec<Step>,
}

impl TransformPlan {
    /// Hidden widths after applying the plan to `hidden` widths.
    pub fn apply_to_widths(&self, hidden: &[usize]) -> Result<Vec<usize>> {
        let mut w = hidden.to_vec();
        for step in &self.steps {
            match *step {
                Step::Deepen { after } => {
                    if after == 0 || after > w.len() {
                        return Err(Error::Shape(format!("deepen after {after} with {} layers", w.len())));
                    }
                    w.insert(after, w[after - 1]);
                }
                Step::Widen { layer, width } => {
                    if layer == 0 || layer > w.len() {
                        return Err(Error::Shape(format!("widen layer {layer} with {} layers", w.len())));
                    }
                    if width < w[layer - 1] {
                        return Err(Error::InvalidPlan(format!(
                            "layer {layer} cannot narrow from {} to {width}",
                            w[layer - 1]
                        )));
                    }
                    w[layer - 1] = width;
                }
            }
        }
        Ok(w)
    }

    /// Applies every step to `net`. Widen step `i` draws its replicas from a
    /// seed derived from `(seed, i)`.
    pub fn apply(&self, net: &Network, noise_eps: f64, seed: u64) -> Result<Network> {
        let mut current = net.clone();
        for (i, step) in self.steps.iter().enumerate() {
            current = match *step {
                Step::Deepen { after } => deepen(&current, after)?,
                Step::Widen { layer, width } => widen(&current, layer, width, noise_eps, step_seed(seed, i))?,
            };
        }
        Ok(current)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(self).expect("plan serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            offset: e.column().saturating_sub(1),
            message: e.to_string(),
        })
    }
}

fn step_seed(seed: u64, step: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng.random()
}

/// Plans a teacher → student transform over hidden widths.
///
/// Student layers are split into contiguous groups, one per teacher layer in
/// order. The first layer of a group is the teacher layer itself; the rest are
/// identity copies inserted by `Deepen` steps. Every student width in a group
/// must be at least the teacher width, and extra width comes from `Widen`
/// steps, applied after all deepening. Among feasible groupings the one with
/// the fewest widen steps (then the fewest added units) wins.
pub fn plan_transform(teacher: &[usize], student: &[usize]) -> Result<TransformPlan> {
    let (t, s) = (teacher.len(), student.len());
    if t == 0 {
        return Err(Error::Plan {
            position: 1,
            reason: "teacher has no hidden layers".into(),
        });
    }
    if s < t {
        return Err(Error::Plan {
            position: s + 1,
            reason: format!("student has {s} hidden layers, fewer than the teacher's {t}"),
        });
    }

    // best[i][p]: cheapest cost covering student layers 0..p with teacher
    // layers 0..i, where teacher layer i-1's group ends at p-1.
    type Cost = (usize, usize);
    let inf: Cost = (usize::MAX, usize::MAX);
    let mut best = vec![vec![inf; s + 1]; t + 1];
    let mut back = vec![vec![0usize; s + 1]; t + 1];
    best[0][0] = (0, 0);
    for i in 1..=t {
        let tw = teacher[i - 1];
        for end in i..=s {
            for start in (i - 1)..end {
                let prev = best[i - 1][start];
                if prev == inf {
                    continue;
                }
                let group = &student[start..end];
                if group.iter().any(|&w| w < tw) {
                    continue;
                }
                let widens = group.iter().filter(|&&w| w > tw).count();
                let added: usize = group.iter().map(|&w| w - tw).sum();
                let cost = (prev.0 + widens, prev.1 + added);
                if cost < best[i][end] {
                    best[i][end] = cost;
                    back[i][end] = start;
                }
            }
        }
    }
    if best[t][s] == inf {
        return Err(Error::Plan {
            position: first_infeasible(teacher, student),
            reason: format!("no width-compatible alignment of {teacher:?} onto {student:?}"),
        });
    }

    let mut starts = vec![0usize; t];
    let mut end = s;
    for i in (1..=t).rev() {
        let start = back[i][end];
        starts[i - 1] = start;
        end = start;
    }
    let mut steps = Vec::new();
    for i in 0..t {
        let group_end = if i + 1 < t { starts[i + 1] } else { s };
        // 1-based position of the aligned teacher layer once earlier groups are expanded.
        let position = starts[i] + 1;
        for _ in starts[i] + 1..group_end {
            steps.push(Step::Deepen { after: position });
        }
    }
    let mut widths = TransformPlan { steps: steps.clone() }.apply_to_widths(teacher)?;
    for (j, &target) in student.iter().enumerate() {
        if target > widths[j] {
            steps.push(Step::Widen {
                layer: j + 1,
                width: target,
            });
            widths[j] = target;
        }
    }
    Ok(TransformPlan { steps })
}

/// First 1-based student position that no prefix alignment can reach.
fn first_infeasible(teacher: &[usize], student: &[usize]) -> usize {
    let (t, s) = (teacher.len(), student.len());
    // reach[i][p]: student layer p can belong to teacher layer i's group
    // with every earlier student layer covered.
    let mut reach = vec![vec![false; s]; t];
    for p in 0..s {
        for i in 0..t {
            // Leave room for the remaining teacher layers.
            if i > p || t - i > s - p || student[p] < teacher[i] {
                continue;
            }
            reach[i][p] = if p == 0 {
                i == 0
            } else {
                reach[i][p - 1] || (i > 0 && reach[i - 1][p - 1])
            };
        }
        if !(0..t).any(|i| reach[i][p]) {
            return p + 1;
        }
    }
    s
}

/// Largest absolute output-probability difference between two networks on `x`.
pub fn max_output_deviation(a: &Network, b: &Network, x: ndarray::ArrayView2<'_, f64>) -> Result<f64> {
    let pa = crate::nn::forward(a, x)?.probabilities;
    let pb = crate::nn::forward(b, x)?.probabilities;
    Ok(pa
        .iter()
        .zip(pb.iter())
        .map(|(u, v)| (u - v).abs())
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{forward, init_random, Activation};
    use ndarray::array;
    use rand_distr::{Distribution, Normal};

    fn probes(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, 1.0).unwrap();
        Array2::from_shape_simple_fn((rows, cols), || d.sample(&mut rng))
    }

    fn logit_deviation(a: &Network, b: &Network, x: &Array2<f64>) -> f64 {
        let la = forward(a, x.view()).unwrap().logits;
        let lb = forward(b, x.view()).unwrap().logits;
        la.iter().zip(lb.iter()).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn mapping_examples() {
        let m = random_mapping(3, 3, 1).unwrap();
        assert_eq!(m.map, vec![0, 1, 2]);
        assert_eq!(m.repetition, vec![1, 1, 1]);

        for seed in 0..20 {
            let m = random_mapping(2, 4, seed).unwrap();
            assert_eq!(&m.map[..2], &[0, 1]);
            assert!(m.map[2..].iter().all(|&k| k < 2));
            assert_eq!(m.repetition.iter().sum::<usize>(), 4);
            assert!(m.repetition.iter().all(|&r| r >= 1));
        }

        let m = random_mapping(2, 1002, 7).unwrap();
        let ones = m.map[2..].iter().filter(|&&k| k == 0).count() as f64 / 1000.0;
        assert!((0.45..=0.55).contains(&ones), "frequency {ones}");

        assert!(matches!(random_mapping(3, 2, 0), Err(Error::InvalidPlan(_))));
    }

    #[test]
    fn figure_two_instance() {
        // Inputs x1, x2; hidden h1, h2; one output. h2 has incoming (0.3, −0.5)
        // and outgoing 0.8. Pick a seed whose single new unit replicates h2.
        let hidden = Layer::new(array![[0.1, 0.2], [0.3, -0.5]], array![0.0, 0.0], Activation::Sigmoid).unwrap();
        let classifier = Layer::new(array![[0.6, 0.8]], array![0.0], Activation::Identity).unwrap();
        let net = Network::new(2, vec![hidden], classifier).unwrap();
        let seed = (0..100)
            .find(|&s| random_mapping(2, 3, s).unwrap().map[2] == 1)
            .expect("some seed replicates h2");
        // widen() draws its mapping from the same seeded stream.
        let wide = widen(&net, 1, 3, 0.0, seed).unwrap();
        let h = &wide.hidden()[0];
        assert_eq!(h.weights.row(2).to_vec(), vec![0.3, -0.5]);
        assert_eq!(h.bias[2], 0.0);
        let out = &wide.classifier().weights;
        assert_eq!(out[[0, 1]], 0.4);
        assert_eq!(out[[0, 2]], 0.4);
        assert_eq!(out[[0, 0]], 0.6);
    }

    #[test]
    fn widen_preserves_function() {
        for act in [Activation::Sigmoid, Activation::Relu] {
            let teacher = init_random(&[70, 30, 20], act, 3).unwrap();
            let student = widen(&teacher, 1, 50, 0.0, 4).unwrap();
            assert_eq!(student.arch(), vec![70, 50, 20]);
            let x = probes(100, 70, 5);
            assert!(max_output_deviation(&teacher, &student, x.view()).unwrap() <= 1e-10);
            assert!(logit_deviation(&teacher, &student, &x) <= 1e-10);
        }
    }

    #[test]
    fn widen_middle_layer_and_compose() {
        let teacher = init_random(&[20, 16, 12, 8, 4], Activation::Sigmoid, 9).unwrap();
        let a = widen(&teacher, 2, 19, 0.0, 1).unwrap();
        let b = widen(&a, 3, 13, 0.0, 2).unwrap();
        let c = widen(&b, 1, 30, 0.0, 3).unwrap();
        assert_eq!(c.hidden_widths(), vec![30, 19, 13]);
        let x = probes(100, 20, 6);
        assert!(logit_deviation(&teacher, &c, &x) <= 1e-10);
    }

    #[test]
    fn outgoing_mass_is_conserved() {
        let teacher = init_random(&[5, 4, 3, 2], Activation::Relu, 1).unwrap();
        let seed = 8;
        let student = widen(&teacher, 1, 9, 0.0, seed).unwrap();
        let mapping = random_mapping(4, 9, seed).unwrap();
        let before = &teacher.hidden()[1].weights;
        let after = &student.hidden()[1].weights;
        for k in 0..4 {
            for out in 0..before.nrows() {
                let mass: f64 = (0..9).filter(|&j| mapping.map[j] == k).map(|j| after[[out, j]]).sum();
                assert!((mass - before[[out, k]]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn widen_to_same_width_is_identity() {
        let net = init_random(&[6, 5, 4, 3], Activation::Sigmoid, 2).unwrap();
        assert_eq!(widen(&net, 2, 4, 0.0, 0).unwrap(), net);
    }

    #[test]
    fn widen_errors() {
        let net = init_random(&[6, 5, 4, 3], Activation::Sigmoid, 2).unwrap();
        assert!(matches!(widen(&net, 1, 4, 0.0, 0), Err(Error::InvalidPlan(_))));
        assert!(matches!(widen(&net, 0, 8, 0.0, 0), Err(Error::Shape(_))));
        assert!(matches!(widen(&net, 3, 8, 0.0, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn widen_noise_only_touches_replicas() {
        let net = init_random(&[6, 5, 3], Activation::Sigmoid, 2).unwrap();
        let noisy = widen(&net, 1, 8, 0.01, 3).unwrap();
        let clean = widen(&net, 1, 8, 0.0, 3).unwrap();
        let (a, b) = (&noisy.hidden()[0].weights, &clean.hidden()[0].weights);
        assert_eq!(a.slice(ndarray::s![..5, ..]), b.slice(ndarray::s![..5, ..]));
        let diff = (a - b).mapv(f64::abs);
        assert!(diff.iter().any(|&d| d > 0.0));
        assert!(diff.iter().all(|&d| d <= 0.01));
    }

    #[test]
    fn deepen_relu_is_exact() {
        let net = init_random(&[8, 6, 4], Activation::Relu, 1).unwrap();
        let deep = deepen(&net, 1).unwrap();
        assert_eq!(deep.arch(), vec![8, 6, 6, 4]);
        let x = probes(50, 8, 2);
        assert!(logit_deviation(&net, &deep, &x) <= 1e-12);
        let t1 = forward(&net, x.view()).unwrap();
        let t2 = forward(&deep, x.view()).unwrap();
        assert_eq!(t2.activations.len(), t1.activations.len() + 1);
        assert_eq!(t2.activations[2].ncols(), 6);
    }

    #[test]
    fn deepen_sigmoid_changes_outputs() {
        let net = init_random(&[8, 6, 4], Activation::Sigmoid, 1).unwrap();
        let deep = deepen(&net, 1).unwrap();
        assert_eq!(deep.hidden().len(), 2);
        assert_eq!(deep.hidden()[1].activation, Activation::Sigmoid);
        let x = probes(20, 8, 3);
        assert!(logit_deviation(&net, &deep, &x) > 1e-6);
        assert!(matches!(deepen(&net, 2), Err(Error::Shape(_))));
    }

    #[test]
    fn plan_examples() {
        let plan = plan_transform(&[70, 30, 20], &[70, 50, 30, 20]).unwrap();
        assert_eq!(
            plan.steps,
            vec![Step::Deepen { after: 2 }, Step::Widen { layer: 2, width: 50 }]
        );
        assert_eq!(plan.apply_to_widths(&[70, 30, 20]).unwrap(), vec![70, 50, 30, 20]);
        assert_eq!(
            plan.to_json().trim(),
            r#"{"steps":[{"op":"deepen","after":2},{"op":"widen","layer":2,"width":50}]}"#
        );
        assert_eq!(TransformPlan::from_json(&plan.to_json()).unwrap(), plan);

        assert!(plan_transform(&[70, 30, 20], &[70, 30, 20]).unwrap().steps.is_empty());
        assert!(matches!(plan_transform(&[70, 30, 20], &[70, 20]), Err(Error::Plan { .. })));

        let plan = plan_transform(&[32, 16, 8], &[32, 24, 16, 8]).unwrap();
        assert_eq!(plan.apply_to_widths(&[32, 16, 8]).unwrap(), vec![32, 24, 16, 8]);
    }

    #[test]
    fn plan_reports_first_infeasible_position() {
        match plan_transform(&[30, 20], &[40, 10, 20]) {
            Err(Error::Plan { position, .. }) => assert_eq!(position, 2),
            other => panic!("{other:?}"),
        }
        match plan_transform(&[30, 20], &[10, 20]) {
            Err(Error::Plan { position, .. }) => assert_eq!(position, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn plan_applies_to_networks() {
        let teacher = init_random(&[10, 7, 5, 3], Activation::Relu, 4).unwrap();
        let plan = plan_transform(&[7, 5], &[9, 7, 6, 5]).unwrap();
        let student = plan.apply(&teacher, 0.0, 11).unwrap();
        assert_eq!(student.hidden_widths(), vec![9, 7, 6, 5]);
        let x = probes(100, 10, 1);
        assert!(logit_deviation(&teacher, &student, &x) <= 1e-10);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        fn feasible_pair() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
            // Build a student by randomly copying and widening teacher layers.
            (proptest::collection::vec(1usize..40, 1..5), any::<u64>()).prop_map(|(teacher, seed)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut student = Vec::new();
                for &w in &teacher {
                    let copies = rng.random_range(1..=3);
                    for _ in 0..copies {
                        student.push(w + rng.random_range(0..=10) * rng.random_range(0..=1));
                    }
                }
                (teacher, student)
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(1000))]
            #[test]
            fn plan_is_sound((teacher, student) in feasible_pair()) {
                let plan = plan_transform(&teacher, &student).unwrap();
                prop_assert_eq!(plan.apply_to_widths(&teacher).unwrap(), student);
            }
        }
    }
}
