import logging
import os
import tempfile
from typing import Dict, Optional

from dag.data import load_image, load_sample
from dag.errors import CheckpointError
from dag.trainer import Checkpoint, infer, load_checkpoint, resize_image

logger = logging.getLogger(__name__)


class InferenceService:
    def __init__(self, checkpoint_path: Optional[str] = None):
        """
        Serve predictions from one checkpoint, loaded on first use.

        Args:
            checkpoint_path (str, optional): checkpoint directory. Defaults to the DAG_CHECKPOINT environment variable.
        """
        self.checkpoint_path = checkpoint_path or os.getenv('DAG_CHECKPOINT')
        self._checkpoint: Optional[Checkpoint] = None

    @property
    def checkpoint(self) -> Checkpoint:
        if self._checkpoint is None:
            if not self.checkpoint_path:
                raise CheckpointError("No checkpoint configured; set DAG_CHECKPOINT")
            self._checkpoint = load_checkpoint(self.checkpoint_path)
        return self._checkpoint

    def status(self) -> Dict:
        return {
            'checkpoint': self.checkpoint_path,
            'loaded': self._checkpoint is not None,
        }

    def predict(self, points_file, image_file, text: str, category: str = '') -> Dict:
        """
        Predict the affordance mask for uploaded files.

        Args:
            points_file: uploaded point file (``x y z label`` lines)
            image_file: uploaded interaction image
            text (str): affordance phrase
            category (str): optional category tag

        Returns:
            dict with the per-point mask, aligned with the uploaded point order
        """
        with tempfile.TemporaryDirectory() as workdir:
            points_path = os.path.join(workdir, 'points.txt')
            image_path = os.path.join(workdir, 'image.png')
            points_file.save(points_path)
            image_file.save(image_path)
            sample = load_sample(points_path, image_path, text, category or text)
        mask = infer(self.checkpoint, sample)
        logger.info(f"Predicted {mask.shape[0]} mask values for '{text}'")
        return {
            'n_points': int(mask.shape[0]),
            'mask': [float(value) for value in mask.tolist()],
        }

    def attention(self, image_file, text: str, word: int, level: int) -> Dict:
        checkpoint = self.checkpoint
        with tempfile.TemporaryDirectory() as workdir:
            image_path = os.path.join(workdir, 'image.png')
            image_file.save(image_path)
            image = resize_image(load_image(image_path), checkpoint.config.image_size)
        heatmap = checkpoint.model.export_attention(image, text, word, level)
        return {
            'token': heatmap.token,
            'level': heatmap.level,
            'word_index': heatmap.word_index,
            'heatmap': heatmap.heatmap.tolist(),
        }
