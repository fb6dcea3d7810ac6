//! Minimal binary glTF writer and a triangle reader for rendering.

use serde_json::json;

use super::ForgeError;

const GLB_MAGIC: u32 = 0x4654_6C67;
const CHUNK_JSON: u32 = 0x4E4F_534A;
const CHUNK_BIN: u32 = 0x004E_4942;

/// Triangle soup with one flat base color.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    pub positions: Vec<[f32; 3]>,
    pub indices: Vec<u32>,
    pub base_color: [f32; 4],
}

impl TriangleMesh {
    /// Axis-aligned box centered at the origin.
    pub fn cuboid(size: [f32; 3], base_color: [f32; 4]) -> Self {
        let [hx, hy, hz] = size.map(|s| s / 2.0);
        let positions = vec![
            [-hx, -hy, -hz],
            [hx, -hy, -hz],
            [hx, hy, -hz],
            [-hx, hy, -hz],
            [-hx, -hy, hz],
            [hx, -hy, hz],
            [hx, hy, hz],
            [-hx, hy, hz],
        ];
        #[rustfmt::skip]
        let indices = vec![
            0, 2, 1, 0, 3, 2, // back
            4, 5, 6, 4, 6, 7, // front
            0, 1, 5, 0, 5, 4, // bottom
            3, 7, 6, 3, 6, 2, // top
            0, 4, 7, 0, 7, 3, // left
            1, 2, 6, 1, 6, 5, // right
        ];
        Self {
            positions,
            indices,
            base_color,
        }
    }

    pub fn bounds(&self) -> Option<([f32; 3], [f32; 3])> {
        let first = *self.positions.first()?;
        Some(self.positions.iter().fold((first, first), |(mut lo, mut hi), p| {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
            (lo, hi)
        }))
    }

    /// Encodes as a single-mesh GLB with deterministic bytes.
    pub fn to_glb(&self, name: &str) -> Vec<u8> {
        let mut bin = Vec::new();
        for p in &self.positions {
            for c in p {
                bin.extend_from_slice(&c.to_le_bytes());
            }
        }
        let positions_len = bin.len();
        for i in &self.indices {
            bin.extend_from_slice(&i.to_le_bytes());
        }
        let indices_len = bin.len() - positions_len;
        pad_to_4(&mut bin, 0);
        let (lo, hi) = self.bounds().unwrap_or(([0.0; 3], [0.0; 3]));

        let doc = json!({
            "asset": { "version": "2.0", "generator": "storyforge" },
            "scene": 0,
            "scenes": [{ "nodes": [0] }],
            "nodes": [{ "mesh": 0, "name": name }],
            "meshes": [{
                "name": name,
                "primitives": [{ "attributes": { "POSITION": 0 }, "indices": 1, "material": 0 }]
            }],
            "materials": [{
                "pbrMetallicRoughness": { "baseColorFactor": self.base_color, "metallicFactor": 0.0 }
            }],
            "buffers": [{ "byteLength": bin.len() }],
            "bufferViews": [
                { "buffer": 0, "byteOffset": 0, "byteLength": positions_len, "target": 34962 },
                { "buffer": 0, "byteOffset": positions_len, "byteLength": indices_len, "target": 34963 }
            ],
            "accessors": [
                { "bufferView": 0, "componentType": 5126, "count": self.positions.len(),
                  "type": "VEC3", "min": lo, "max": hi },
                { "bufferView": 1, "componentType": 5125, "count": self.indices.len(), "type": "SCALAR" }
            ]
        });
        let mut json_bytes = serde_json::to_vec(&doc).expect("static json");
        pad_to_4(&mut json_bytes, b' ');

        let total = 12 + 8 + json_bytes.len() + 8 + bin.len();
        let mut out = Vec::with_capacity(total);
        out.extend_from_slice(&GLB_MAGIC.to_le_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(total as u32).to_le_bytes());
        out.extend_from_slice(&(json_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&CHUNK_JSON.to_le_bytes());
        out.extend_from_slice(&json_bytes);
        out.extend_from_slice(&(bin.len() as u32).to_le_bytes());
        out.extend_from_slice(&CHUNK_BIN.to_le_bytes());
        out.extend_from_slice(&bin);
        out
    }
}

fn pad_to_4(buf: &mut Vec<u8>, byte: u8) {
    while buf.len() % 4 != 0 {
        buf.push(byte);
    }
}

/// Reads every triangle of the default scene into world space.
pub fn read_triangles(glb: &[u8]) -> Result<TriangleMesh, ForgeError> {
    let gltf = gltf::Gltf::from_slice(glb).map_err(|e| ForgeError::InvalidMesh(e.to_string()))?;
    let blob = gltf.blob.as_deref();
    let scene = gltf
        .default_scene()
        .or_else(|| gltf.scenes().next())
        .ok_or_else(|| ForgeError::InvalidMesh("no scene".into()))?;

    let mut mesh = TriangleMesh {
        positions: Vec::new(),
        indices: Vec::new(),
        base_color: [0.7, 0.7, 0.7, 1.0],
    };
    let mut color_set = false;
    let mut stack: Vec<(gltf::Node, [[f32; 4]; 4])> =
        scene.nodes().map(|n| (n, IDENTITY)).collect();
    while let Some((node, parent)) = stack.pop() {
        let world = mat_mul(&parent, &node.transform().matrix());
        if let Some(m) = node.mesh() {
            for primitive in m.primitives() {
                if primitive.mode() != gltf::mesh::Mode::Triangles {
                    continue;
                }
                let reader = primitive.reader(|buffer| match buffer.source() {
                    gltf::buffer::Source::Bin => blob,
                    gltf::buffer::Source::Uri(_) => None,
                });
                let Some(positions) = reader.read_positions() else {
                    continue;
                };
                let base = mesh.positions.len() as u32;
                mesh.positions
                    .extend(positions.map(|p| transform_point(&world, p)));
                let count = mesh.positions.len() as u32 - base;
                match reader.read_indices() {
                    Some(idx) => mesh.indices.extend(idx.into_u32().map(|i| base + i)),
                    None => mesh.indices.extend(base..base + count),
                }
                if !color_set {
                    mesh.base_color = primitive
                        .material()
                        .pbr_metallic_roughness()
                        .base_color_factor();
                    color_set = true;
                }
            }
        }
        stack.extend(node.children().map(|c| (c, world)));
    }
    if mesh.indices.len() < 3 {
        return Err(ForgeError::InvalidMesh("mesh has no triangles".into()));
    }
    Ok(mesh)
}

const IDENTITY: [[f32; 4]; 4] = [
    [1.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 1.0],
];

// Column-major, as glTF stores them.
fn mat_mul(a: &[[f32; 4]; 4], b: &[[f32; 4]; 4]) -> [[f32; 4]; 4] {
    let mut out = [[0.0; 4]; 4];
    for (c, col) in out.iter_mut().enumerate() {
        for (r, cell) in col.iter_mut().enumerate() {
            *cell = (0..4).map(|k| a[k][r] * b[c][k]).sum();
        }
    }
    out
}

fn transform_point(m: &[[f32; 4]; 4], p: [f32; 3]) -> [f32; 3] {
    let mut out = [0.0; 3];
    for (r, o) in out.iter_mut().enumerate() {
        *o = m[0][r] * p[0] + m[1][r] * p[1] + m[2][r] * p[2] + m[3][r];
    }
    out
}
