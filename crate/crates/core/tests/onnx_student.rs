//! Builds the distilled student architecture as an ONNX graph and runs it
//! through the portable-model backend.
#![cfg(feature = "onnx")]

use std::path::Path;

use image::{Rgb, RgbImage};
use prost::Message;
use tract_onnx::pb::attribute_proto::AttributeType;
use tract_onnx::pb::tensor_proto::DataType;
use tract_onnx::pb::tensor_shape_proto::{dimension, Dimension};
use tract_onnx::pb::{
    type_proto, AttributeProto, GraphProto, ModelProto, NodeProto, OperatorSetIdProto, TensorProto,
    TensorShapeProto, TypeProto, ValueInfoProto,
};

use fds_core::features::{open_extractor, ExtractInput, ExtractorSpec, FeatureShape, SampleKey};

fn ints(name: &str, v: &[i64]) -> AttributeProto {
    AttributeProto {
        name: name.into(),
        r#type: AttributeType::Ints as i32,
        ints: v.to_vec(),
        ..Default::default()
    }
}

fn value_info(name: &str, dims: &[i64]) -> ValueInfoProto {
    ValueInfoProto {
        name: name.into(),
        r#type: Some(TypeProto {
            value: Some(type_proto::Value::TensorType(type_proto::Tensor {
                elem_type: DataType::Float as i32,
                shape: Some(TensorShapeProto {
                    dim: dims
                        .iter()
                        .map(|&d| Dimension {
                            value: Some(dimension::Value::DimValue(d)),
                            ..Default::default()
                        })
                        .collect(),
                }),
            })),
            ..Default::default()
        }),
        ..Default::default()
    }
}

struct Builder {
    graph: GraphProto,
    last: String,
    n: usize,
}

impl Builder {
    fn next(&mut self) -> String {
        self.n += 1;
        format!("t{}", self.n)
    }

    // Deterministic small weights so the output is finite and nonconstant.
    fn conv(&mut self, cin: i64, cout: i64, k: i64, pad: i64, relu: bool) {
        let w = self.next();
        let len = (cin * cout * k * k) as usize;
        self.graph.initializer.push(TensorProto {
            name: w.clone(),
            dims: vec![cout, cin, k, k],
            data_type: DataType::Float as i32,
            float_data: (0..len).map(|i| ((i * 37 % 17) as f32 - 8.0) / (8.0 * len as f32).sqrt()).collect(),
            ..Default::default()
        });
        let out = self.next();
        self.graph.node.push(NodeProto {
            op_type: "Conv".into(),
            input: vec![self.last.clone(), w],
            output: vec![out.clone()],
            attribute: vec![
                ints("kernel_shape", &[k, k]),
                ints("strides", &[1, 1]),
                ints("pads", &[pad, pad, pad, pad]),
            ],
            ..Default::default()
        });
        self.last = out;
        if relu {
            let out = self.next();
            self.graph.node.push(NodeProto {
                op_type: "Relu".into(),
                input: vec![self.last.clone()],
                output: vec![out.clone()],
                ..Default::default()
            });
            self.last = out;
        }
    }

    fn avgpool(&mut self) {
        let out = self.next();
        self.graph.node.push(NodeProto {
            op_type: "AveragePool".into(),
            input: vec![self.last.clone()],
            output: vec![out.clone()],
            attribute: vec![
                ints("kernel_shape", &[2, 2]),
                ints("strides", &[2, 2]),
                ints("pads", &[1, 1, 1, 1]),
            ],
            ..Default::default()
        });
        self.last = out;
    }
}

/// Student network with base width `c`: conv k4 p3, avgpool k2 s2 p1,
/// conv k4 p3, avgpool k2 s2 p1, conv k3 p1, conv k4 p0 to 384 channels.
fn write_student(path: &Path, c: i64, side: i64) {
    let mut b = Builder {
        graph: GraphProto {
            name: "student".into(),
            input: vec![value_info("image", &[1, 3, side, side])],
            ..Default::default()
        },
        last: "image".into(),
        n: 0,
    };
    b.conv(3, c, 4, 3, true);
    b.avgpool();
    b.conv(c, 2 * c, 4, 3, true);
    b.avgpool();
    b.conv(2 * c, 2 * c, 3, 1, true);
    b.conv(2 * c, 384, 4, 0, false);
    let last = b.last.clone();
    b.graph.output.push(ValueInfoProto {
        name: last,
        ..Default::default()
    });
    let model = ModelProto {
        ir_version: 7,
        opset_import: vec![OperatorSetIdProto {
            domain: String::new(),
            version: 13,
        }],
        graph: Some(b.graph),
        ..Default::default()
    };
    std::fs::write(path, model.encode_to_vec()).unwrap();
}

fn gradient(side: u32) -> RgbImage {
    RgbImage::from_fn(side, side, |x, y| Rgb([x as u8, y as u8, (x ^ y) as u8]))
}

#[test]
fn student_maps_256_to_64x64x384() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("student.onnx");
    write_student(&path, 4, 256);
    let spec = ExtractorSpec::portable_model(&path).with_expected_shape(FeatureShape {
        height: 64,
        width: 64,
        channels: 384,
    });
    let ex = open_extractor(&spec).unwrap();
    let img = gradient(256);
    let key = SampleKey::stem("g");
    let a = ex.extract(ExtractInput { image: &img, key: &key }).unwrap();
    assert_eq!(a.shape().to_string(), "64x64x384");
    let b = ex.extract(ExtractInput { image: &img, key: &key }).unwrap();
    assert_eq!(a.data(), b.data());
    assert!(a.data().iter().any(|&v| v != a.data()[0]));
}

#[test]
fn wrong_input_size_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("student.onnx");
    write_student(&path, 2, 64);
    let ex = open_extractor(&ExtractorSpec::portable_model(&path)).unwrap();
    let key = SampleKey::stem("g");
    let ok = ex.extract(ExtractInput { image: &gradient(64), key: &key }).unwrap();
    assert_eq!((ok.height(), ok.width(), ok.channels()), (16, 16, 384));
    let err = ex.extract(ExtractInput { image: &gradient(32), key: &key }).unwrap_err();
    assert!(err.to_string().contains("expects 64x64"), "{err}");
}

#[test]
fn corrupt_model_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.onnx");
    std::fs::write(&path, b"not a model").unwrap();
    let err = open_extractor(&ExtractorSpec::portable_model(&path)).err().unwrap();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("broken.onnx"), "{err}");
}
