use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use capdet::detect::boxes::BBox;

type Box4 = (f64, f64, f64, f64);

fn to_py(e: capdet::Error) -> PyErr {
    match e {
        capdet::Error::Config(_) | capdet::Error::Metric(_) | capdet::Error::InvalidRecord { .. } => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn bbox((x_min, y_min, x_max, y_max): Box4) -> BBox {
    BBox {
        x_min,
        y_min,
        x_max,
        y_max,
    }
}

fn tuple(b: &BBox) -> Box4 {
    (b.x_min, b.y_min, b.x_max, b.y_max)
}

#[pymodule]
mod capdet_py {
    use std::path::PathBuf;

    use candle_core::DType;
    use capdet::detect::GroundTruth;
    use capdet::metrics::{self, CaptionExample, DetectionExample};
    use capdet::model::{JointModel, ModelConfig};
    use capdet::scenegen::{self, ImageTensor, SceneConfig};
    use capdet::trainer::{self, checkpoint, FreezePlan, TrainConfig, TrainingSet};

    use super::*;

    /// An RGB image with channel values in [0, 1].
    #[pyclass(name = "Image", from_py_object)]
    #[derive(Clone)]
    struct PyImage {
        inner: ImageTensor,
    }

    #[pymethods]
    impl PyImage {
        #[staticmethod]
        fn read_ppm(path: PathBuf) -> PyResult<Self> {
            ImageTensor::read_ppm(&path).map(|inner| Self { inner }).map_err(to_py)
        }

        fn write_ppm(&self, path: PathBuf) -> PyResult<()> {
            self.inner.write_ppm(&path).map_err(to_py)
        }

        #[getter]
        fn height(&self) -> usize {
            self.inner.height
        }

        #[getter]
        fn width(&self) -> usize {
            self.inner.width
        }

        fn pixel(&self, x: usize, y: usize) -> PyResult<[f32; 3]> {
            if x >= self.inner.width || y >= self.inner.height {
                return Err(PyValueError::new_err(format!("pixel ({x}, {y}) outside the image")));
            }
            Ok(self.inner.pixel(x, y))
        }

        /// Flat row-major HWC channel values.
        fn data(&self) -> Vec<f32> {
            self.inner.data.clone()
        }

        fn __repr__(&self) -> String {
            format!("Image({}x{})", self.inner.width, self.inner.height)
        }
    }

    /// One synthetic scene: image, boxes, class ids and reference captions.
    #[pyclass(name = "Scene", get_all)]
    struct PyScene {
        id: String,
        image: PyImage,
        boxes: Vec<Box4>,
        labels: Vec<usize>,
        captions: Vec<String>,
    }

    impl PyScene {
        fn from_record(r: scenegen::SceneRecord) -> Self {
            Self {
                id: r.id,
                boxes: r.boxes.iter().map(tuple).collect(),
                labels: r.labels,
                captions: r.captions,
                image: PyImage { inner: r.image },
            }
        }

        fn record(&self) -> scenegen::SceneRecord {
            scenegen::SceneRecord {
                id: self.id.clone(),
                image: self.image.inner.clone(),
                boxes: self.boxes.iter().copied().map(bbox).collect(),
                labels: self.labels.clone(),
                captions: self.captions.clone(),
            }
        }
    }

    #[pymethods]
    impl PyScene {
        fn __repr__(&self) -> String {
            format!("Scene(id={:?}, objects={}, caption={:?})", self.id, self.labels.len(), self.captions[0])
        }
    }

    fn scene_config(image_size: usize, max_objects: usize) -> PyResult<SceneConfig> {
        let cfg = SceneConfig {
            image_size,
            max_objects,
            ..SceneConfig::default()
        };
        cfg.validate().map_err(to_py)?;
        Ok(cfg)
    }

    #[pyfunction]
    #[pyo3(signature = (seed, image_size = 128, max_objects = 4))]
    fn generate_scene(seed: u64, image_size: usize, max_objects: usize) -> PyResult<PyScene> {
        let cfg = scene_config(image_size, max_objects)?;
        scenegen::generate_scene(seed, &cfg).map(PyScene::from_record).map_err(to_py)
    }

    #[pyfunction]
    #[pyo3(signature = (seed, count, image_size = 128, max_objects = 4))]
    fn generate_dataset(seed: u64, count: usize, image_size: usize, max_objects: usize) -> PyResult<Vec<PyScene>> {
        let cfg = scene_config(image_size, max_objects)?;
        let records = scenegen::generate_dataset(seed, count, &cfg).map_err(to_py)?;
        Ok(records.into_iter().map(PyScene::from_record).collect())
    }

    /// Word list of the synthetic scenes (reserved tokens first).
    #[pyclass(name = "Vocabulary", from_py_object)]
    #[derive(Clone)]
    struct PyVocabulary {
        inner: scenegen::Vocabulary,
    }

    #[pymethods]
    impl PyVocabulary {
        #[new]
        fn new(words: Vec<String>) -> Self {
            Self {
                inner: scenegen::Vocabulary::new(words),
            }
        }

        /// The vocabulary of the default scene generator.
        #[staticmethod]
        fn scenes() -> Self {
            Self {
                inner: SceneConfig::default().vocabulary(),
            }
        }

        fn tokenize(&self, text: &str) -> Vec<u32> {
            self.inner.tokenize(text).ids
        }

        fn detokenize(&self, ids: Vec<u32>) -> String {
            self.inner.detokenize(&scenegen::TokenSequence::new(ids))
        }

        fn tokens(&self) -> Vec<String> {
            self.inner.tokens().to_vec()
        }

        fn __len__(&self) -> usize {
            self.inner.len()
        }
    }

    /// The joint captioning and detection model.
    #[pyclass(name = "Model", unsendable)]
    struct PyModel {
        inner: JointModel,
        vocab: scenegen::Vocabulary,
    }

    #[pymethods]
    impl PyModel {
        /// A freshly initialised toy-sized model for the default scenes.
        #[staticmethod]
        #[pyo3(signature = (seed = 0))]
        fn toy(seed: u64) -> PyResult<Self> {
            let sc = SceneConfig::default();
            let vocab = sc.vocabulary();
            let cfg = ModelConfig::toy(sc.num_classes(), vocab.len());
            let inner = JointModel::new(&cfg, seed, DType::F32).map_err(to_py)?;
            Ok(Self { inner, vocab })
        }

        #[staticmethod]
        fn load(checkpoint_path: PathBuf) -> PyResult<Self> {
            let ck = checkpoint::load(&checkpoint_path).map_err(to_py)?;
            let inner = ck.build_model(DType::F32).map_err(to_py)?;
            Ok(Self {
                inner,
                vocab: scenegen::Vocabulary::new(ck.header.vocab.clone()),
            })
        }

        #[getter]
        fn image_size(&self) -> usize {
            self.inner.config().image_size
        }

        #[getter]
        fn num_parameters(&self) -> usize {
            self.inner.params().num_elements()
        }

        /// `(caption, log-probability)`; never touches the detection head.
        #[pyo3(signature = (image, beam = 5))]
        fn caption(&self, image: &PyImage, beam: usize) -> PyResult<(String, f64)> {
            let hyp = self.inner.caption(&image.inner, beam).map_err(to_py)?;
            Ok((self.vocab.detokenize(&hyp.tokens), hyp.logprob))
        }

        /// `[(box, class_id, score), ...]` after NMS.
        fn detect(&self, image: &PyImage) -> PyResult<Vec<(Box4, usize, f64)>> {
            let dets = self.inner.detect(&image.inner).map_err(to_py)?;
            Ok(dets.iter().map(|d| (tuple(&d.bbox), d.class_id, d.score)).collect())
        }

        /// Trains in place on `scenes`, writing the log and checkpoint to
        /// `out_dir`; returns the total loss of every step.
        #[pyo3(signature = (scenes, out_dir, steps, lambda_ = 0.1, learning_rate = 1e-4, batch_size = 2, freeze_plan = "none", seed = 0))]
        #[allow(clippy::too_many_arguments)]
        fn train(
            &self,
            scenes: Vec<PyRef<'_, PyScene>>,
            out_dir: PathBuf,
            steps: usize,
            lambda_: f64,
            learning_rate: f64,
            batch_size: usize,
            freeze_plan: &str,
            seed: u64,
        ) -> PyResult<Vec<f64>> {
            let freeze_plan: FreezePlan = freeze_plan.parse().map_err(to_py)?;
            let records: Vec<_> = scenes.iter().map(|s| s.record()).collect();
            let set = TrainingSet::new(&records, &self.vocab, &self.inner).map_err(to_py)?;
            let cfg = TrainConfig {
                lambda: lambda_,
                learning_rate,
                batch_size,
                steps,
                seed,
                freeze_plan,
                checkpoint_every: 0,
                ..TrainConfig::default()
            };
            let outcome = trainer::train(&self.inner, &set, &self.vocab, &cfg, &out_dir, None).map_err(to_py)?;
            Ok(outcome.log.iter().map(|r| r.loss.total).collect())
        }
    }

    fn caption_set(candidates: Vec<String>, references: Vec<Vec<String>>) -> PyResult<Vec<CaptionExample>> {
        if candidates.len() != references.len() {
            return Err(PyValueError::new_err("one reference list per candidate is required"));
        }
        Ok(candidates
            .iter()
            .zip(&references)
            .map(|(c, r)| CaptionExample::from_text(c, r))
            .collect())
    }

    /// Corpus BLEU-n.
    #[pyfunction]
    fn bleu(candidates: Vec<String>, references: Vec<Vec<String>>, n: usize) -> PyResult<f64> {
        metrics::bleu(&caption_set(candidates, references)?, n).map_err(to_py)
    }

    #[pyfunction]
    fn rouge_l(candidates: Vec<String>, references: Vec<Vec<String>>) -> PyResult<f64> {
        metrics::rouge_l(&caption_set(candidates, references)?).map_err(to_py)
    }

    #[pyfunction]
    fn cider(candidates: Vec<String>, references: Vec<Vec<String>>) -> PyResult<f64> {
        metrics::cider(&caption_set(candidates, references)?).map_err(to_py)
    }

    /// COCO-style AP summary. `detections[i]` holds `(box, class, score)`
    /// and `truths[i]` holds `(box, class)` for image `i`.
    #[pyfunction]
    fn coco_map(
        detections: Vec<Vec<(Box4, usize, f64)>>,
        truths: Vec<Vec<(Box4, usize)>>,
        num_classes: usize,
        image_size: usize,
    ) -> PyResult<std::collections::BTreeMap<&'static str, f64>> {
        if detections.len() != truths.len() {
            return Err(PyValueError::new_err("detections and truths must cover the same images"));
        }
        let set: Vec<DetectionExample> = detections
            .into_iter()
            .zip(truths)
            .map(|(dets, gts)| DetectionExample {
                detections: dets
                    .into_iter()
                    .map(|(b, class_id, score)| capdet::detect::Detection {
                        bbox: bbox(b),
                        class_id,
                        score,
                    })
                    .collect(),
                truth: GroundTruth {
                    boxes: gts.iter().map(|g| bbox(g.0)).collect(),
                    labels: gts.iter().map(|g| g.1).collect(),
                },
            })
            .collect();
        let r = metrics::coco_map(&set, num_classes, image_size).map_err(to_py)?;
        Ok([
            ("mAP", r.map),
            ("AP50", r.ap50),
            ("AP75", r.ap75),
            ("AP_S", r.ap_s),
            ("AP_M", r.ap_m),
            ("AP_L", r.ap_l),
        ]
        .into_iter()
        .collect())
    }

    #[pyfunction]
    fn iou(a: Box4, b: Box4) -> f64 {
        capdet::detect::boxes::iou(&bbox(a), &bbox(b))
    }

    /// Runs the command-line interface with `args` (without the program
    /// name) and returns its exit code.
    #[pyfunction]
    fn run_cli(args: Vec<String>) -> i32 {
        capdet::cli::run(std::iter::once("capdet".to_string()).chain(args))
    }
}
