use crate::error::{Error, Result};
use crate::forest::{Conditioning, ForestParams, RandomForest, Tree, TreeNode};
use crate::model::{AcMask, GenerativeModel, ModelConfig};
use crate::pca::PcaBasis;
use crate::sampler::{ClusterModel, GaussianStats, OutlierMethod};
use crate::stage1::Stage1Model;

pub const MAGIC: &[u8; 4] = b"FFGM";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 1;
const CRC_LEN: usize = 4;

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        v.iter().for_each(|&x| self.f64(x));
    }
    fn section(&mut self, body: Writer) {
        self.u64(body.0.len() as u64);
        self.0.extend(body.0);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::Format(format!("{} section truncated", self.what)));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if n.saturating_mul(8) > self.bytes.len() {
            return Err(Error::Format(format!("{} section truncated", self.what)));
        }
        (0..n).map(|_| self.f64()).collect()
    }
    fn section(&mut self, what: &'static str) -> Result<Reader<'a>> {
        self.what = what;
        let len = self.u64()?;
        let len = usize::try_from(len).map_err(|_| Error::Format(format!("{what} section too long")))?;
        Ok(Reader {
            bytes: self.take(len)?,
            what,
        })
    }
    fn finish(&self) -> Result<()> {
        if self.bytes.is_empty() {
            Ok(())
        } else {
            Err(Error::Format(format!(
                "{} trailing bytes in {} section",
                self.bytes.len(),
                self.what
            )))
        }
    }
}

fn conditioning_code(c: Conditioning) -> u8 {
    match c {
        Conditioning::DcMap => 0,
        Conditioning::PositionDc => 1,
    }
}

fn write_config(c: &ModelConfig) -> Writer {
    let mut w = Writer::default();
    w.u32(c.spectral_dim);
    w.u16(c.ac_mask.bits());
    w.u32(c.forest.trees);
    w.u32(c.forest.max_depth);
    w.u32(c.forest.min_samples_leaf);
    w.u32(c.forest.features_per_split);
    w.u8(c.forest.bootstrap as u8);
    w.u8(conditioning_code(c.conditioning));
    w.u8(c.outlier.code());
    w.u32(c.clusters);
    w.u32(c.max_attempts);
    w.u64(c.seed);
    w.u8(c.upsample as u8);
    w
}

fn read_bool(r: &mut Reader) -> Result<bool> {
    match r.u8()? {
        0 => Ok(false),
        1 => Ok(true),
        v => Err(Error::Format(format!("invalid flag byte {v}"))),
    }
}

fn read_config(r: &mut Reader) -> Result<ModelConfig> {
    let spectral_dim = r.u32()?;
    let ac_mask = AcMask::from_bits(r.u16()?)?;
    let forest = ForestParams {
        trees: r.u32()?,
        max_depth: r.u32()?,
        min_samples_leaf: r.u32()?,
        features_per_split: r.u32()?,
        bootstrap: read_bool(r)?,
    };
    let conditioning = match r.u8()? {
        0 => Conditioning::DcMap,
        1 => Conditioning::PositionDc,
        v => return Err(Error::Format(format!("unknown conditioning code {v}"))),
    };
    let code = r.u8()?;
    let outlier = OutlierMethod::from_code(code)
        .ok_or_else(|| Error::Format(format!("unknown outlier method code {code}")))?;
    let config = ModelConfig {
        spectral_dim,
        ac_mask,
        forest,
        conditioning,
        outlier,
        clusters: r.u32()?,
        max_attempts: r.u32()?,
        seed: r.u64()?,
        upsample: read_bool(r)?,
    };
    config.validate()?;
    Ok(config)
}

fn write_basis(w: &mut Writer, b: &PcaBasis) {
    w.u32(b.dim());
    w.u32(b.kept());
    w.f64s(b.eigenvalues());
    for k in b.ac_kernels() {
        w.f64s(k);
    }
}

fn read_basis(r: &mut Reader) -> Result<PcaBasis> {
    let dim = r.u32()?;
    let kept = r.u32()?;
    if dim < 2 || kept >= dim {
        return Err(Error::Format(format!("basis of dim {dim} keeping {kept}")));
    }
    let eigenvalues = r.f64s(dim - 1)?;
    let kernels = (0..kept).map(|_| r.f64s(dim)).collect::<Result<_>>()?;
    PcaBasis::from_parts(dim, kernels, eigenvalues)
}

fn write_tree(w: &mut Writer, t: &Tree) {
    w.u32(t.nodes().len());
    for n in t.nodes() {
        match n {
            TreeNode::Leaf { output } => {
                w.u8(0);
                w.u32(output.len());
                w.f64s(output);
            }
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                w.u8(1);
                w.u32(*feature);
                w.f64(*threshold);
                w.u32(*left);
                w.u32(*right);
            }
        }
    }
}

fn read_tree(r: &mut Reader) -> Result<Tree> {
    let n = r.u32()?;
    let mut nodes = Vec::with_capacity(n.min(r.bytes.len()));
    for _ in 0..n {
        nodes.push(match r.u8()? {
            0 => {
                let len = r.u32()?;
                TreeNode::Leaf {
                    output: r.f64s(len)?,
                }
            }
            1 => TreeNode::Split {
                feature: r.u32()?,
                threshold: r.f64()?,
                left: r.u32()?,
                right: r.u32()?,
            },
            v => return Err(Error::Format(format!("unknown tree node tag {v}"))),
        });
    }
    Tree::from_nodes(nodes)
}

impl GenerativeModel {
    /// Serialises the model; saving the same model twice yields identical bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION as usize);
        w.u8(self.label);
        w.section(write_config(&self.config));

        let mut s = Writer::default();
        s.u32(self.stage1.bases().len());
        for b in self.stage1.bases() {
            write_basis(&mut s, b);
        }
        w.section(s);

        let mut s = Writer::default();
        write_basis(&mut s, &self.stage2);
        w.section(s);

        let mut s = Writer::default();
        s.u32(self.forest.ensembles().len());
        for e in self.forest.ensembles() {
            s.u32(e.len());
            for t in e {
                write_tree(&mut s, t);
            }
        }
        w.section(s);

        let mut s = Writer::default();
        s.u32(self.stats.dim());
        s.f64s(&self.stats.mean);
        s.f64s(&self.stats.std);
        w.section(s);

        let mut s = Writer::default();
        let c = &self.clusters;
        s.u32(c.centroids.len());
        s.u32(c.centroids.first().map_or(0, Vec::len));
        for centroid in &c.centroids {
            s.f64s(centroid);
        }
        s.f64s(&c.mse);
        for &n in &c.sizes {
            s.u64(n as u64);
        }
        w.section(s);

        let crc = crc32fast::hash(&w.0);
        w.0.extend_from_slice(&crc.to_le_bytes());
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<GenerativeModel> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing FFGM magic".into()));
        }
        if bytes.len() < HEADER_LEN + CRC_LEN {
            return Err(Error::Format("file truncated".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Version {
                expected: VERSION,
                found: version,
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - CRC_LEN);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }

        let mut r = Reader {
            bytes: &body[HEADER_LEN..],
            what: "header",
        };
        let label = bytes[8];

        let mut s = r.section("config")?;
        let config = read_config(&mut s)?;
        s.finish()?;

        let mut s = r.section("stage 1")?;
        let n = s.u32()?;
        let bases = (0..n).map(|_| read_basis(&mut s)).collect::<Result<_>>()?;
        let stage1 = Stage1Model::from_bases(bases)?;
        s.finish()?;

        let mut s = r.section("stage 2")?;
        let stage2 = read_basis(&mut s)?;
        s.finish()?;
        if stage2.kept() + 1 != config.spectral_dim {
            return Err(Error::Format(format!(
                "stage 2 keeps {} kernels, config expects {}",
                stage2.kept(),
                config.spectral_dim - 1
            )));
        }

        let mut s = r.section("forest")?;
        let positions = s.u32()?;
        let mut ensembles = Vec::new();
        for _ in 0..positions {
            let trees = s.u32()?;
            ensembles.push((0..trees).map(|_| read_tree(&mut s)).collect::<Result<Vec<_>>>()?);
        }
        let forest = RandomForest::from_ensembles(config.forest, config.conditioning, ensembles)?;
        s.finish()?;

        let mut s = r.section("statistics")?;
        let dim = s.u32()?;
        let stats = GaussianStats {
            mean: s.f64s(dim)?,
            std: s.f64s(dim)?,
        };
        s.finish()?;
        if dim != config.spectral_dim {
            return Err(Error::Format(format!(
                "latent statistics have dimension {dim}, expected {}",
                config.spectral_dim
            )));
        }

        let mut s = r.section("clusters")?;
        let k = s.u32()?;
        let cdim = s.u32()?;
        if k > 0 && cdim != dim {
            return Err(Error::Format(format!(
                "centroids have dimension {cdim}, expected {dim}"
            )));
        }
        let centroids = (0..k).map(|_| s.f64s(cdim)).collect::<Result<_>>()?;
        let mse = s.f64s(k)?;
        let sizes = (0..k).map(|_| s.u64().map(|v| v as usize)).collect::<Result<_>>()?;
        s.finish()?;
        r.finish()?;

        Ok(GenerativeModel {
            config,
            label,
            stage1,
            stage2,
            forest,
            stats,
            clusters: ClusterModel {
                centroids,
                mse,
                sizes,
            },
        })
    }
}
