//! Scene and object feature vectors for the language model's feature slots.
//!
//! The featurizers are fixed functions of the point cloud. The attribute
//! encoder (`fq`, `fc`) and the projectors `Ps`, `Po` and `P_L` are trainable.

mod featurize;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::scalar::Scalar;
use crate::scene::ObjectAttributes;
use crate::tensor::Matrix;

pub use featurize::{
    encode_position, featurize_scene, object_featurizer, scene_featurizer, ObjectFeatures, SceneFeatures,
    OBJECT_FEATURE_DIM, SCENE_FEATURE_DIM,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceiverConfig {
    pub n_freq: usize,
    pub d_q: usize,
    pub d_c: usize,
    pub d_feat: usize,
    pub d_hidden: usize,
    pub d_model: usize,
    pub d_scene_in: usize,
    pub d_object_in: usize,
    pub seed: u64,
}

impl Default for PerceiverConfig {
    fn default() -> Self {
        Self {
            n_freq: 8,
            d_q: 8,
            d_c: 8,
            d_feat: 256,
            d_hidden: 256,
            d_model: 128,
            d_scene_in: SCENE_FEATURE_DIM,
            d_object_in: OBJECT_FEATURE_DIM,
            seed: 0,
        }
    }
}

impl PerceiverConfig {
    /// Width of `fp`: a sine and cosine per frequency per axis.
    pub fn d_pos(&self) -> usize {
        3 * 2 * self.n_freq
    }

    /// Width of `fa = [fp; fq; fc]`.
    pub fn d_attr(&self) -> usize {
        self.d_pos() + self.d_q + self.d_c
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("n_freq", self.n_freq),
            ("d_q", self.d_q),
            ("d_c", self.d_c),
            ("d_feat", self.d_feat),
            ("d_hidden", self.d_hidden),
            ("d_model", self.d_model),
            ("d_scene_in", self.d_scene_in),
            ("d_object_in", self.d_object_in),
        ];
        for (name, v) in named {
            if v == 0 {
                return Err(Error::Config(format!("perceiver {name} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Perceiver {
    pub config: PerceiverConfig,
    pub fq: Linear,
    pub fc: Linear,
    pub ps: Linear,
    pub ps_norm: LayerNorm,
    pub po_norm: LayerNorm,
    pub po: [Linear; 3],
    pub pl: Linear,
}

fn check(context: &str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::dim(context, expected, actual))
    }
}

fn rows<T: Scalar>(data: &[Vec<f64>]) -> Matrix<T> {
    let cols = data.first().map_or(0, Vec::len);
    let flat: Vec<f64> = data.iter().flatten().copied().collect();
    Matrix::from_f64(data.len(), cols, &flat)
}

impl Perceiver {
    /// Registers every perceiver parameter as trainable under `perceiver.*`.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: &PerceiverConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let c = config;
        let std = |d_in: usize| 1.0 / (d_in as f64).sqrt();
        let d_cat = c.d_object_in + c.d_attr();
        Ok(Self {
            fq: Linear::new(store, "perceiver.fq", 3, c.d_q, std(3), true, rng),
            fc: Linear::new(store, "perceiver.fc", 3, c.d_c, std(3), true, rng),
            ps: Linear::new(store, "perceiver.ps", c.d_scene_in, c.d_feat, std(c.d_scene_in), true, rng),
            ps_norm: LayerNorm::new(store, "perceiver.ps_norm", c.d_feat, true),
            po_norm: LayerNorm::new(store, "perceiver.po_norm", d_cat, true),
            po: [
                Linear::new(store, "perceiver.po.0", d_cat, c.d_hidden, std(d_cat), true, rng),
                Linear::new(store, "perceiver.po.1", c.d_hidden, c.d_hidden, std(c.d_hidden), true, rng),
                Linear::new(store, "perceiver.po.2", c.d_hidden, c.d_feat, std(c.d_hidden), true, rng),
            ],
            pl: Linear::new(store, "perceiver.pl", c.d_feat, c.d_model, std(c.d_feat), true, rng),
            config: config.clone(),
        })
    }

    /// `fa` for each object as rows: `[fp; fq·size; fc·color]`.
    pub fn attributes_node<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        attrs: &[ObjectAttributes],
    ) -> NodeId {
        let fp: Vec<Vec<f64>> = attrs.iter().map(|a| encode_position(a.center, self.config.n_freq)).collect();
        let fp = tape.constant(rows(&fp));
        let size = tape.constant(rows(&attrs.iter().map(|a| a.size.to_vec()).collect::<Vec<_>>()));
        let color = tape.constant(rows(&attrs.iter().map(|a| a.mean_color.to_vec()).collect::<Vec<_>>()));
        let fq = self.fq.forward(tape, store, size);
        let fc = self.fc.forward(tape, store, color);
        tape.concat_cols(&[fp, fq, fc])
    }

    /// `Ps`: linear map then layer normalization.
    pub fn scene_projection_node<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, fs: NodeId) -> NodeId {
        let h = self.ps.forward(tape, store, fs);
        self.ps_norm.forward(tape, store, h)
    }

    /// `Po`: layer normalization over `[fo; fa]`, then a three-layer GELU MLP.
    pub fn object_projection_node<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        fo: NodeId,
        fa: NodeId,
    ) -> NodeId {
        let x = tape.concat_cols(&[fo, fa]);
        let mut h = self.po_norm.forward(tape, store, x);
        for (i, layer) in self.po.iter().enumerate() {
            h = layer.forward(tape, store, h);
            if i + 1 < self.po.len() {
                h = tape.gelu(h);
            }
        }
        h
    }

    /// `Fs` (1×d_model) and, if the scene has objects, `Fo` (n×d_model).
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        features: &SceneFeatures,
    ) -> Result<(NodeId, Option<NodeId>)> {
        let c = &self.config;
        check("scene features", c.d_scene_in, features.scene.len())?;
        let fs = tape.constant(Matrix::from_f64(1, features.scene.len(), &features.scene));
        let fs = self.scene_projection_node(tape, store, fs);
        let scene = self.pl.forward(tape, store, fs);
        if features.objects.is_empty() {
            return Ok((scene, None));
        }
        for o in &features.objects {
            check("object features", c.d_object_in, o.features.len())?;
        }
        let fo = tape.constant(rows(&features.objects.iter().map(|o| o.features.clone()).collect::<Vec<_>>()));
        let attrs: Vec<ObjectAttributes> = features.objects.iter().map(|o| o.attributes).collect();
        let fa = self.attributes_node(tape, store, &attrs);
        let fo = self.object_projection_node(tape, store, fo, fa);
        let objects = self.pl.forward(tape, store, fo);
        Ok((scene, Some(objects)))
    }

    pub fn encode_attributes<T: Scalar>(&self, store: &ParamStore<T>, attrs: &ObjectAttributes) -> Vec<T> {
        let mut tape = Tape::inference();
        let n = self.attributes_node(&mut tape, store, std::slice::from_ref(attrs));
        tape.value(n).data().to_vec()
    }

    /// `fs' = LayerNorm(Ps·fs)`.
    pub fn project_scene<T: Scalar>(&self, store: &ParamStore<T>, fs: &[T]) -> Result<Vec<T>> {
        check("project_scene input", self.config.d_scene_in, fs.len())?;
        let mut tape = Tape::inference();
        let x = tape.constant(Matrix::row_vector(fs.to_vec()));
        let n = self.scene_projection_node(&mut tape, store, x);
        Ok(tape.value(n).data().to_vec())
    }

    /// `fo' = Po([fo; fa])`.
    pub fn project_object<T: Scalar>(&self, store: &ParamStore<T>, fo: &[T], fa: &[T]) -> Result<Vec<T>> {
        check("project_object fo", self.config.d_object_in, fo.len())?;
        check("project_object fa", self.config.d_attr(), fa.len())?;
        let mut tape = Tape::inference();
        let a = tape.constant(Matrix::row_vector(fo.to_vec()));
        let b = tape.constant(Matrix::row_vector(fa.to_vec()));
        let n = self.object_projection_node(&mut tape, store, a, b);
        Ok(tape.value(n).data().to_vec())
    }

    /// `P_L·f`, one language model input vector.
    pub fn project_to_lm<T: Scalar>(&self, store: &ParamStore<T>, f: &[T]) -> Result<Vec<T>> {
        check("project_to_lm input", self.config.d_feat, f.len())?;
        let mut tape = Tape::inference();
        let x = tape.constant(Matrix::row_vector(f.to_vec()));
        let n = self.pl.forward(&mut tape, store, x);
        Ok(tape.value(n).data().to_vec())
    }

    /// `Fs` and `[Fo_1..Fo_n]` in ascending object id order.
    pub fn perceive_scene<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        features: &SceneFeatures,
    ) -> Result<(Vec<T>, Vec<Vec<T>>)> {
        let mut tape = Tape::inference();
        let (s, o) = self.forward(&mut tape, store, features)?;
        let fs = tape.value(s).data().to_vec();
        let fo = match o {
            Some(o) => {
                let m = tape.value(o);
                (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
            }
            None => Vec::new(),
        };
        Ok((fs, fo))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gelu;
    use crate::scene::generate_fixture_scene;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(config: &PerceiverConfig) -> (ParamStore<f64>, Perceiver) {
        let mut store = ParamStore::new();
        let p = Perceiver::new(&mut store, config, &mut ChaCha8Rng::seed_from_u64(config.seed)).unwrap();
        (store, p)
    }

    fn set(store: &mut ParamStore<f64>, id: crate::autodiff::ParamId, rows: usize, cols: usize, v: &[f64]) {
        store.get_mut(id).value = Matrix::from_f64(rows, cols, v);
    }

    fn toy() -> PerceiverConfig {
        PerceiverConfig {
            n_freq: 1,
            d_q: 2,
            d_c: 2,
            d_feat: 4,
            d_hidden: 2,
            d_model: 6,
            d_scene_in: 4,
            d_object_in: 2,
            seed: 1,
        }
    }

    #[test]
    fn default_dimension_chain() {
        let (store, p) = build(&PerceiverConfig::default());
        let (scene, _) = generate_fixture_scene(0, 8, 40);
        let f = featurize_scene(&scene).unwrap();
        let (fs, fo) = p.perceive_scene(&store, &f).unwrap();
        assert_eq!(fs.len(), 128);
        assert_eq!(fo.len(), 8);
        assert!(fo.iter().all(|v| v.len() == 128));
        let fa = p.encode_attributes(&store, &f.objects[0].attributes);
        assert_eq!(fa.len(), 64);
        let fsp = p.project_scene(&store, &f.scene).unwrap();
        let fop = p.project_object(&store, &f.objects[0].features, &fa).unwrap();
        assert_eq!(fsp.len(), 256);
        assert_eq!(fop.len(), fsp.len());
        assert_eq!((fs.clone(), fo.clone()), p.perceive_scene(&store, &f).unwrap());
    }

    #[test]
    fn attribute_blocks() {
        let (mut store, p) = build(&PerceiverConfig::default());
        let attrs = ObjectAttributes {
            center: [0.0; 3],
            size: [1.0, 2.0, 3.0],
            mean_color: [0.2, 0.4, 0.6],
        };
        for id in [p.fq.weight, p.fq.bias, p.fc.weight, p.fc.bias] {
            let v = &mut store.get_mut(id).value;
            *v = Matrix::zeros(v.rows(), v.cols());
        }
        let fa = p.encode_attributes(&store, &attrs);
        assert_eq!(&fa[..48], encode_position([0.0; 3], 8).as_slice());
        assert!(fa[48..].iter().all(|&v| v == 0.0));

        let w: Vec<f64> = (0..24).map(|i| (i as f64 - 11.0) / 7.0).collect();
        let b: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
        set(&mut store, p.fq.weight, 8, 3, &w);
        set(&mut store, p.fq.bias, 1, 8, &b);
        let fa = p.encode_attributes(&store, &attrs);
        for j in 0..8 {
            let expect = w[3 * j] + 2.0 * w[3 * j + 1] + 3.0 * w[3 * j + 2] + b[j];
            assert!((fa[48 + j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn scene_projection_normalizes() {
        let (mut store, p) = build(&toy());
        set(&mut store, p.ps.weight, 4, 4, Matrix::<f64>::identity(4).data());
        let fs = [1.0, 2.0, 3.0, 6.0];
        let out = p.project_scene(&store, &fs).unwrap();
        let mean = 3.0;
        let sd = ((4.0 + 1.0 + 0.0 + 9.0) / 4.0f64).sqrt();
        for (o, x) in out.iter().zip(fs) {
            assert!((o - (x - mean) / sd).abs() < 1e-6);
        }
        let m: f64 = out.iter().sum::<f64>() / 4.0;
        let v: f64 = out.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-6 && (v - 1.0).abs() < 1e-6);
        assert!(p.project_scene(&store, &[1.0; 3]).is_err());
    }

    #[test]
    fn object_projection_toy() {
        // fo 2 + fa (6 + 2 + 2) = 12 inputs, hidden 2, output 4.
        let (mut store, p) = build(&toy());
        let fo = [0.5, -1.0];
        let fa: Vec<f64> = (0..10).map(|i| (i as f64 * 0.37).sin()).collect();
        let w0: Vec<f64> = (0..24).map(|i| ((i * 7 % 11) as f64 - 5.0) / 10.0).collect();
        let w1 = [1.0, -0.5, 0.25, 2.0];
        let w2 = [1.0, 0.0, 0.0, 1.0, -1.0, 1.0, 0.5, 0.5];
        set(&mut store, p.po[0].weight, 2, 12, &w0);
        set(&mut store, p.po[1].weight, 2, 2, &w1);
        set(&mut store, p.po[2].weight, 4, 2, &w2);
        set(&mut store, p.po[2].bias, 1, 4, &[0.1, 0.2, 0.3, 0.4]);

        let x: Vec<f64> = fo.iter().chain(&fa).copied().collect();
        let mean = x.iter().sum::<f64>() / 12.0;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0;
        let xn: Vec<f64> = x.iter().map(|v| (v - mean) / (var + 1e-9).sqrt()).collect();
        let h0: Vec<f64> = (0..2).map(|j| gelu((0..12).map(|i| w0[12 * j + i] * xn[i]).sum::<f64>())).collect();
        let h1: Vec<f64> = (0..2).map(|j| gelu(w1[2 * j] * h0[0] + w1[2 * j + 1] * h0[1])).collect();
        let expect: Vec<f64> = (0..4).map(|j| w2[2 * j] * h1[0] + w2[2 * j + 1] * h1[1] + 0.1 * (j + 1) as f64).collect();
        let out = p.project_object(&store, &fo, &fa).unwrap();
        for (o, e) in out.iter().zip(&expect) {
            assert!((o - e).abs() < 1e-6);
        }

        set(&mut store, p.po[2].weight, 4, 2, &[0.0; 8]);
        assert_eq!(p.project_object(&store, &fo, &fa).unwrap(), vec![0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn lm_projection_toy() {
        let (mut store, p) = build(&toy());
        let mut w = Matrix::<f64>::zeros(6, 4);
        for i in 0..4 {
            w.set(i, i, 1.0);
        }
        store.get_mut(p.pl.weight).value = w;
        let f = [0.5, -2.0, 3.0, 1.25];
        let out = p.project_to_lm(&store, &f).unwrap();
        assert_eq!(&out[..4], &f);
        assert_eq!(&out[4..], &[0.0, 0.0]);

        let mut store = build(&toy()).0;
        set(&mut store, p.pl.bias, 1, 6, &[1.0, -1.0, 0.5, 0.0, 2.0, 3.0]);
        let a = 2.5;
        let fx = p.project_to_lm(&store, &f).unwrap();
        let scaled: Vec<f64> = f.iter().map(|v| v * a).collect();
        let fax = p.project_to_lm(&store, &scaled).unwrap();
        let bias = store.value(p.pl.bias).data();
        for j in 0..6 {
            assert!((fax[j] - (a * fx[j] - (a - 1.0) * bias[j])).abs() < 1e-12);
        }
    }
}
