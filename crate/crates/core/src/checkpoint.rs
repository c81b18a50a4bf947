//! Binary checkpoint container shared by every trained artifact. Layout:
//! magic "SEGM", u32 version, u32 meta length + JSON meta, u32 section
//! count, then per section a name, row/col counts and f64 little-endian
//! payload. The meta JSON records enough architecture to rebuild the
//! networks; sections hold the flattened parameters.

use std::collections::HashMap;
use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::classifier::SoftmaxClassifier;
use crate::decomposer::DecomposerModel;
use crate::error::{Error, Result};
use crate::fgen::{CriticModel, GeneratorModel};
use crate::mi::{ClassId, ClubVariationalEncoder, InfoNceScorer};
use crate::numerics::{Activation, Layer, Matrix, MlpModel};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SEGM";
pub const CHECKPOINT_VERSION: u32 = 1;

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

/// Architecture of one MLP: layer widths and activations.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct NetSpec {
    pub dims: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl NetSpec {
    fn of(net: &MlpModel) -> Self {
        NetSpec {
            dims: net.dims(),
            activations: net.activations(),
        }
    }

    fn build(&self, params: &Matrix, path: &Path) -> Result<MlpModel> {
        if self.dims.len() != self.activations.len() + 1 || self.dims.is_empty() {
            return Err(Error::BadPayload {
                path: path_str(path),
                expected: "one activation per layer".into(),
                found: format!(
                    "{} dims, {} activations",
                    self.dims.len(),
                    self.activations.len()
                ),
            });
        }
        let layers = self
            .dims
            .windows(2)
            .zip(&self.activations)
            .map(|(pair, &activation)| Layer {
                weights: Matrix::zeros(pair[0], pair[1]),
                bias: vec![0.0; pair[1]],
                activation,
            })
            .collect();
        let mut net = MlpModel::from_layers(layers);
        if params.data().len() != net.param_count() {
            return Err(Error::BadPayload {
                path: path_str(path),
                expected: format!("{} parameters", net.param_count()),
                found: format!("{}", params.data().len()),
            });
        }
        net.load_flat_params(params.data());
        Ok(net)
    }
}

fn flat(net: &MlpModel) -> Matrix {
    let params = net.flatten_params();
    let n = params.len();
    Matrix::from_vec(1, n, params)
}

fn write_container(path: &Path, meta: &impl Serialize, sections: &[(&str, &Matrix)]) -> Result<()> {
    for (name, m) in sections {
        if let Some((r, c)) = m.first_non_finite() {
            return Err(Error::NonFinite {
                context: format!("checkpoint section {name}"),
                row: r,
                col: c,
            });
        }
    }
    let meta_bytes = serde_json::to_vec(meta).map_err(|e| Error::Json {
        path: path_str(path),
        source: e,
    })?;
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.write_u32::<LittleEndian>(CHECKPOINT_VERSION).unwrap();
    buf.write_u32::<LittleEndian>(meta_bytes.len() as u32)
        .unwrap();
    buf.extend_from_slice(&meta_bytes);
    buf.write_u32::<LittleEndian>(sections.len() as u32)
        .unwrap();
    for (name, m) in sections {
        let name_bytes = name.as_bytes();
        buf.write_u32::<LittleEndian>(name_bytes.len() as u32)
            .unwrap();
        buf.extend_from_slice(name_bytes);
        buf.write_u32::<LittleEndian>(m.rows() as u32).unwrap();
        buf.write_u32::<LittleEndian>(m.cols() as u32).unwrap();
        for &v in m.data() {
            buf.write_f64::<LittleEndian>(v).unwrap();
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path_str(path), e))?;
    file.write_all(&buf)
        .map_err(|e| Error::io(path_str(path), e))?;
    Ok(())
}

fn read_container(path: &Path) -> Result<(serde_json::Value, HashMap<String, Matrix>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path_str(path), e))?;
    let mut cur = Cursor::new(bytes.as_slice());
    let truncated = || Error::BadPayload {
        path: path_str(path),
        expected: "complete checkpoint container".into(),
        found: format!("{} bytes", bytes.len()),
    };

    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic).map_err(|_| truncated())?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path_str(path),
            expected: String::from_utf8_lossy(&CHECKPOINT_MAGIC).into_owned(),
            found: format!("{magic:?}"),
        });
    }
    let version = cur.read_u32::<LittleEndian>().map_err(|_| truncated())?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::BadVersion {
            path: path_str(path),
            supported: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let meta_len = cur.read_u32::<LittleEndian>().map_err(|_| truncated())? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    cur.read_exact(&mut meta_bytes).map_err(|_| truncated())?;
    let meta: serde_json::Value = serde_json::from_slice(&meta_bytes).map_err(|e| Error::Json {
        path: path_str(path),
        source: e,
    })?;

    let n_sections = cur.read_u32::<LittleEndian>().map_err(|_| truncated())? as usize;
    let mut sections = HashMap::with_capacity(n_sections);
    for _ in 0..n_sections {
        let name_len = cur.read_u32::<LittleEndian>().map_err(|_| truncated())? as usize;
        let mut name_bytes = vec![0u8; name_len];
        cur.read_exact(&mut name_bytes).map_err(|_| truncated())?;
        let name = String::from_utf8(name_bytes).map_err(|_| Error::BadPayload {
            path: path_str(path),
            expected: "utf-8 section name".into(),
            found: "invalid bytes".into(),
        })?;
        let rows = cur.read_u32::<LittleEndian>().map_err(|_| truncated())? as usize;
        let cols = cur.read_u32::<LittleEndian>().map_err(|_| truncated())? as usize;
        let mut data = vec![0.0; rows * cols];
        for v in &mut data {
            *v = cur.read_f64::<LittleEndian>().map_err(|_| truncated())?;
        }
        let m = Matrix::from_vec(rows, cols, data);
        if let Some((r, c)) = m.first_non_finite() {
            return Err(Error::NonFinite {
                context: format!("checkpoint section {name} in {}", path_str(path)),
                row: r,
                col: c,
            });
        }
        sections.insert(name, m);
    }
    if cur.position() != bytes.len() as u64 {
        return Err(Error::BadPayload {
            path: path_str(path),
            expected: format!("{} bytes", cur.position()),
            found: format!("{} bytes (trailing data)", bytes.len()),
        });
    }
    Ok((meta, sections))
}

fn take_section(sections: &mut HashMap<String, Matrix>, name: &str, path: &Path) -> Result<Matrix> {
    sections.remove(name).ok_or_else(|| Error::BadPayload {
        path: path_str(path),
        expected: format!("section {name}"),
        found: "missing".into(),
    })
}

fn parse_meta<T: serde::de::DeserializeOwned>(
    meta: serde_json::Value,
    kind: &str,
    path: &Path,
) -> Result<T> {
    let found = meta
        .get("kind")
        .and_then(|v| v.as_str())
        .unwrap_or("unknown")
        .to_string();
    if found != kind {
        return Err(Error::BadPayload {
            path: path_str(path),
            expected: format!("kind {kind}"),
            found: format!("kind {found}"),
        });
    }
    serde_json::from_value(meta).map_err(|e| Error::Json {
        path: path_str(path),
        source: e,
    })
}

#[derive(Serialize, Deserialize)]
struct DecomposerMeta {
    kind: String,
    semantic_encoder: NetSpec,
    residual_encoder: Option<NetSpec>,
    decoder: NetSpec,
    scorer_dims: [usize; 2],
    venc: Option<NetSpec>,
    venc_attr_dim: Option<usize>,
}

pub fn save_decomposer(path: &Path, model: &DecomposerModel) -> Result<()> {
    let meta = DecomposerMeta {
        kind: "decomposer".into(),
        semantic_encoder: NetSpec::of(&model.semantic_encoder),
        residual_encoder: model.residual_encoder.as_ref().map(NetSpec::of),
        decoder: NetSpec::of(&model.decoder),
        scorer_dims: [model.scorer.weight.rows(), model.scorer.weight.cols()],
        venc: model.venc.as_ref().map(|v| NetSpec::of(v.net())),
        venc_attr_dim: model.venc.as_ref().map(|v| v.attr_dim()),
    };
    let sem = flat(&model.semantic_encoder);
    let dec = flat(&model.decoder);
    let mut sections: Vec<(&str, &Matrix)> = vec![
        ("semantic_encoder", &sem),
        ("decoder", &dec),
        ("scorer", &model.scorer.weight),
    ];
    let res = model.residual_encoder.as_ref().map(flat);
    if let Some(res) = &res {
        sections.push(("residual_encoder", res));
    }
    let venc = model.venc.as_ref().map(|v| flat(v.net()));
    if let Some(venc) = &venc {
        sections.push(("venc", venc));
    }
    write_container(path, &meta, &sections)
}

pub fn load_decomposer(path: &Path) -> Result<DecomposerModel> {
    let (meta, mut sections) = read_container(path)?;
    let meta: DecomposerMeta = parse_meta(meta, "decomposer", path)?;
    let semantic_encoder = meta.semantic_encoder.build(
        &take_section(&mut sections, "semantic_encoder", path)?,
        path,
    )?;
    let decoder = meta
        .decoder
        .build(&take_section(&mut sections, "decoder", path)?, path)?;
    let scorer_w = take_section(&mut sections, "scorer", path)?;
    if [scorer_w.rows(), scorer_w.cols()] != meta.scorer_dims {
        return Err(Error::BadPayload {
            path: path_str(path),
            expected: format!("scorer {}x{}", meta.scorer_dims[0], meta.scorer_dims[1]),
            found: format!("{}x{}", scorer_w.rows(), scorer_w.cols()),
        });
    }
    let residual_encoder = match &meta.residual_encoder {
        Some(spec) => Some(spec.build(
            &take_section(&mut sections, "residual_encoder", path)?,
            path,
        )?),
        None => None,
    };
    let venc = match (&meta.venc, meta.venc_attr_dim) {
        (Some(spec), Some(attr_dim)) => {
            let net = spec.build(&take_section(&mut sections, "venc", path)?, path)?;
            Some(ClubVariationalEncoder::from_net(net, attr_dim)?)
        }
        (None, None) => None,
        _ => {
            return Err(Error::BadPayload {
                path: path_str(path),
                expected: "venc spec and attr dim together".into(),
                found: "only one of them".into(),
            })
        }
    };
    Ok(DecomposerModel {
        semantic_encoder,
        residual_encoder,
        decoder,
        scorer: InfoNceScorer { weight: scorer_w },
        venc,
    })
}

#[derive(Serialize, Deserialize)]
struct GanMeta {
    kind: String,
    generator: NetSpec,
    noise_dim: usize,
    attr_dim: usize,
    critic: NetSpec,
}

pub fn save_gan(path: &Path, gen: &GeneratorModel, critic: &CriticModel) -> Result<()> {
    let meta = GanMeta {
        kind: "gan".into(),
        generator: NetSpec::of(&gen.net),
        noise_dim: gen.noise_dim,
        attr_dim: gen.attr_dim,
        critic: NetSpec::of(&critic.net),
    };
    let g = flat(&gen.net);
    let c = flat(&critic.net);
    write_container(path, &meta, &[("generator", &g), ("critic", &c)])
}

pub fn load_gan(path: &Path) -> Result<(GeneratorModel, CriticModel)> {
    let (meta, mut sections) = read_container(path)?;
    let meta: GanMeta = parse_meta(meta, "gan", path)?;
    let g_net = meta
        .generator
        .build(&take_section(&mut sections, "generator", path)?, path)?;
    let c_net = meta
        .critic
        .build(&take_section(&mut sections, "critic", path)?, path)?;
    if g_net.input_dim() != meta.noise_dim + meta.attr_dim {
        return Err(Error::BadPayload {
            path: path_str(path),
            expected: format!("generator input {}", meta.noise_dim + meta.attr_dim),
            found: format!("{}", g_net.input_dim()),
        });
    }
    Ok((
        GeneratorModel {
            net: g_net,
            noise_dim: meta.noise_dim,
            attr_dim: meta.attr_dim,
        },
        CriticModel { net: c_net },
    ))
}

#[derive(Serialize, Deserialize)]
struct ClassifierMeta {
    kind: String,
    classes: Vec<ClassId>,
    dim: usize,
}

pub fn save_classifier(path: &Path, clf: &SoftmaxClassifier) -> Result<()> {
    let meta = ClassifierMeta {
        kind: "classifier".into(),
        classes: clf.classes().to_vec(),
        dim: clf.dim(),
    };
    let bias = Matrix::from_vec(1, clf.bias.len(), clf.bias.clone());
    write_container(path, &meta, &[("weights", &clf.weights), ("bias", &bias)])
}

pub fn load_classifier(path: &Path) -> Result<SoftmaxClassifier> {
    let (meta, mut sections) = read_container(path)?;
    let meta: ClassifierMeta = parse_meta(meta, "classifier", path)?;
    let weights = take_section(&mut sections, "weights", path)?;
    let bias = take_section(&mut sections, "bias", path)?;
    if weights.rows() != meta.classes.len() || weights.cols() != meta.dim {
        return Err(Error::BadPayload {
            path: path_str(path),
            expected: format!("weights {}x{}", meta.classes.len(), meta.dim),
            found: format!("{}x{}", weights.rows(), weights.cols()),
        });
    }
    if bias.data().len() != meta.classes.len() {
        return Err(Error::BadPayload {
            path: path_str(path),
            expected: format!("{} biases", meta.classes.len()),
            found: format!("{}", bias.data().len()),
        });
    }
    let mut clf = SoftmaxClassifier::new(meta.classes, meta.dim)?;
    clf.weights = weights;
    clf.bias = bias.data().to_vec();
    Ok(clf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomposer::{init_decomposer, DecomposerTrainConfig};
    use crate::numerics::Rng;

    fn sample_decomposer(use_residual: bool) -> DecomposerModel {
        let cfg = DecomposerTrainConfig {
            semantic_dim: 4,
            residual_dim: 3,
            hidden_dim: 6,
            venc_hidden_dim: 5,
            use_residual,
            lambda_r: if use_residual { 1.0 } else { 0.0 },
            ..DecomposerTrainConfig::default()
        };
        init_decomposer(7, 2, &cfg, &mut Rng::new(3)).unwrap()
    }

    #[test]
    fn decomposer_round_trip_preserves_behavior() {
        for use_residual in [true, false] {
            let model = sample_decomposer(use_residual);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("decomposer.segm");
            save_decomposer(&path, &model).unwrap();
            let loaded = load_decomposer(&path).unwrap();

            assert_eq!(
                model.semantic_encoder.flatten_params(),
                loaded.semantic_encoder.flatten_params()
            );
            assert_eq!(model.scorer.weight, loaded.scorer.weight);
            assert_eq!(
                model.residual_encoder.is_some(),
                loaded.residual_encoder.is_some()
            );
            assert_eq!(model.venc.is_some(), loaded.venc.is_some());

            let x = Rng::new(5).normal_matrix(4, 7);
            let (a_s, a_r) = model.decompose(&x).unwrap();
            let (b_s, b_r) = loaded.decompose(&x).unwrap();
            assert_eq!(a_s, b_s);
            assert_eq!(a_r, b_r);
            if let Some(v) = &loaded.venc {
                let z = Rng::new(6).normal_matrix(3, 3);
                let orig = model.venc.as_ref().unwrap().forward(&z).unwrap();
                let got = v.forward(&z).unwrap();
                assert_eq!(orig.mu, got.mu);
                assert_eq!(orig.logvar, got.logvar);
            }
        }
    }

    #[test]
    fn gan_round_trip_preserves_generation() {
        let mut rng = Rng::new(7);
        let gen = GeneratorModel::new(3, 2, 6, 5, &mut rng).unwrap();
        let critic = CriticModel::new(5, 2, 4, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gan.segm");
        save_gan(&path, &gen, &critic).unwrap();
        let (gen2, critic2) = load_gan(&path).unwrap();

        let noise = Rng::new(8).normal_matrix(4, 3);
        let attrs = Rng::new(9).normal_matrix(4, 2);
        assert_eq!(
            gen.generate(&noise, &attrs).unwrap(),
            gen2.generate(&noise, &attrs).unwrap()
        );
        assert_eq!(critic.net.flatten_params(), critic2.net.flatten_params());
        assert_eq!(gen2.noise_dim, 3);
        assert_eq!(gen2.attr_dim, 2);
    }

    #[test]
    fn classifier_round_trip_preserves_predictions() {
        let mut clf = SoftmaxClassifier::new(vec![4, 0, 9], 3).unwrap();
        clf.weights = Rng::new(10).normal_matrix(3, 3);
        clf.bias = vec![0.5, -1.0, 2.0];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clf.segm");
        save_classifier(&path, &clf).unwrap();
        let loaded = load_classifier(&path).unwrap();
        assert_eq!(clf.classes(), loaded.classes());

        let z = Rng::new(11).normal_matrix(5, 3);
        assert_eq!(
            clf.predict_proba(&z).unwrap(),
            loaded.predict_proba(&z).unwrap()
        );
    }

    #[test]
    fn corrupted_containers_are_rejected() {
        let model = sample_decomposer(true);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.segm");
        save_decomposer(&path, &model).unwrap();
        let original = std::fs::read(&path).unwrap();

        // Wrong magic.
        let mut bad = original.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_decomposer(&path),
            Err(Error::BadMagic { .. })
        ));

        // Unsupported version.
        let mut bad = original.clone();
        bad[4] = 9;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_decomposer(&path),
            Err(Error::BadVersion { found: 9, .. })
        ));

        // Truncation.
        std::fs::write(&path, &original[..original.len() - 3]).unwrap();
        assert!(matches!(
            load_decomposer(&path),
            Err(Error::BadPayload { .. })
        ));

        // Trailing garbage.
        let mut bad = original.clone();
        bad.extend_from_slice(&[0, 1, 2]);
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_decomposer(&path),
            Err(Error::BadPayload { .. })
        ));
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let model = sample_decomposer(false);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.segm");
        save_decomposer(&path, &model).unwrap();
        let err = load_gan(&path).unwrap_err();
        assert!(matches!(err, Error::BadPayload { .. }));
        assert!(err.to_string().contains("gan"), "{err}");
    }

    #[test]
    fn non_finite_parameters_never_reach_disk() {
        let mut model = sample_decomposer(false);
        model.scorer.weight.set(0, 0, f64::NAN);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.segm");
        assert!(matches!(
            save_decomposer(&path, &model),
            Err(Error::NonFinite { .. })
        ));
        assert!(!path.exists());
    }
}
