//! Fixtures shared by the benchmarks. Everything is seeded so runs compare.

use hierball::embedding::{init_prototypes, EmbedConfig, PrototypeSet};
use hierball::learner::{FeatureExtractor, LearnerConfig};
use hierball::{BallConfig, ClosurePair, HierarchyTree};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A point with norm in `[0, max_norm)`.
fn in_ball(rng: &mut ChaCha8Rng, dim: usize, max_norm: f64) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let r = max_norm * rng.random::<f64>();
    v.into_iter().map(|x| x * r / n).collect()
}

pub type PointPair = (Vec<f64>, Vec<f64>);

pub fn point_pairs(dim: usize, n: usize, seed: u64) -> (BallConfig, Vec<PointPair>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ball = BallConfig::new(dim).expect("positive dim");
    let pairs = (0..n)
        .map(|_| (in_ball(&mut rng, dim, 0.9), in_ball(&mut rng, dim, 0.9)))
        .collect();
    (ball, pairs)
}

pub fn tangent_vectors(dim: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect()
}

pub struct Stage1Fixture {
    pub tree: HierarchyTree,
    pub set: PrototypeSet,
    pub points: Vec<Vec<f64>>,
    pub pairs: Vec<ClosurePair>,
    pub negatives: Vec<Vec<usize>>,
}

/// Initial prototypes of a balanced tree plus 10 sampled negatives per
/// closure pair.
pub fn stage1(branching: usize, depth: usize, dim: usize) -> Stage1Fixture {
    let tree = HierarchyTree::balanced(branching, depth).expect("valid shape");
    let cfg = EmbedConfig {
        dim,
        ..EmbedConfig::default()
    };
    let set = init_prototypes(&tree, &cfg).expect("valid config");
    let pairs = tree.transitive_closure();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let negatives = pairs
        .iter()
        .map(|p| tree.sample_negatives(p.child, 10, &mut rng))
        .collect();
    Stage1Fixture {
        points: set.coords(),
        tree,
        set,
        pairs,
        negatives,
    }
}

pub struct LearnerFixture {
    pub net: FeatureExtractor,
    pub teacher: FeatureExtractor,
    pub prototypes: PrototypeSet,
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub cfg: LearnerConfig,
}

/// A `input_dim → 64 → 64 → embed_dim` extractor, random prototypes and a
/// batch of `batch` samples.
pub fn learner(input_dim: usize, embed_dim: usize, classes: usize, batch: usize) -> LearnerFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = LearnerConfig::default();
    let mut sizes = vec![input_dim];
    sizes.extend(&cfg.hidden);
    sizes.push(embed_dim);
    let net = FeatureExtractor::new(&sizes, &mut rng)
        .expect("valid sizes")
        .with_clip(cfg.feature_clip);
    let teacher = FeatureExtractor::new(&sizes, &mut rng)
        .expect("valid sizes")
        .with_clip(cfg.feature_clip);
    let ball = BallConfig::new(embed_dim).expect("positive dim");
    let text: String = std::iter::once(format!("{embed_dim}\t1\t{classes}\n"))
        .chain((0..classes).map(|c| {
            let p = in_ball(&mut rng, embed_dim, 0.8);
            let coords: Vec<String> = p.iter().map(|x| x.to_string()).collect();
            format!("c{c}\t{}\n", coords.join("\t"))
        }))
        .collect();
    let prototypes = PrototypeSet::parse(&text).expect("well-formed fixture");
    debug_assert_eq!(prototypes.ball, ball);
    let inputs = tangent_vectors(input_dim, batch, 12);
    let labels = (0..batch).map(|i| i % classes).collect();
    LearnerFixture {
        net,
        teacher,
        prototypes,
        inputs,
        labels,
        cfg,
    }
}

/// `n` random feature vectors for herding.
pub fn features(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    tangent_vectors(dim, n, seed)
}
