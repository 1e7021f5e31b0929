"""Test module for classes and methods in txt2vec"""

import math
import unittest

import numpy as np
import torch

from tests import finite_difference_error
from xling_emotion_tts.configs import Txt2VecConfig
from xling_emotion_tts.exceptions import CheckpointError, ConfigurationError
from xling_emotion_tts.txt2vec import (
    Txt2Vec,
    Txt2VecBatch,
    VarianceValues,
    length_regulate,
    length_regulate_batch,
    lengths_to_mask,
    load_txt2vec_state,
    txt2vec_loss,
)

SMALL_TXT2VEC = Txt2VecConfig(
    phoneme_vocab=10,
    num_languages=2,
    d_model=16,
    n_heads=2,
    encoder_blocks=1,
    decoder_blocks=1,
    ff_dim=32,
    dropout=0.0,
    num_units=8,
    n_mels=16,
    style_kernel=3,
    variance_kernel=3,
)


def small_batch(dtype: torch.dtype = torch.float32) -> Txt2VecBatch:
    """Two items: three phonemes over six frames, two phonemes over four"""
    generator = torch.Generator().manual_seed(0)
    phoneme_mask = torch.tensor([[True, True, True], [True, True, False]])
    durations = torch.tensor([[2, 1, 3], [2, 2, 0]])
    frame_mask = lengths_to_mask(torch.tensor([6, 4]), 6)
    mel_lengths = torch.tensor([7, 5])
    return Txt2VecBatch(
        phoneme_ids=torch.tensor([[1, 4, 7], [2, 9, 0]]),
        phoneme_mask=phoneme_mask,
        language_ids=torch.tensor([0, 1]),
        durations=durations,
        pitch=torch.randn(2, 3, generator=generator).to(dtype),
        energy=torch.randn(2, 3, generator=generator).to(dtype),
        reference_mel=torch.randn(2, 7, 16, generator=generator).to(dtype),
        mel_lengths=mel_lengths,
        units=torch.randint(0, 8, (2, 6), generator=generator),
        frame_mask=frame_mask,
    )


def batch_loss(model: Txt2Vec, batch: Txt2VecBatch):
    """Teacher-forced loss against the batch's own targets"""
    outputs = model(batch)
    targets = VarianceValues(
        pitch=batch.pitch,
        energy=batch.energy,
        duration=torch.log(batch.durations.clamp(min=1).to(batch.pitch.dtype)),
    )
    return txt2vec_loss(
        outputs.logits,
        batch.units,
        outputs.variances,
        targets,
        batch.frame_mask,
        batch.phoneme_mask,
    )


class TestLengthRegulate(unittest.TestCase):
    """Tests for the length regulator"""

    def test_repeats_in_order(self):
        """Tests that row i appears durations[i] times"""
        hidden = torch.tensor([[1.0], [2.0], [3.0]])
        frames = length_regulate(hidden, torch.tensor([2, 1, 3]))
        self.assertEqual(
            [1.0, 1.0, 2.0, 3.0, 3.0, 3.0], frames.squeeze(-1).tolist()
        )

    def test_invalid_durations(self):
        """Tests zero durations and mismatched lengths"""
        hidden = torch.zeros(3, 2)
        with self.assertRaises(ValueError):
            length_regulate(hidden, torch.tensor([1, 0, 1]))
        with self.assertRaises(ValueError):
            length_regulate(hidden, torch.tensor([1, 1]))

    def test_batch_ignores_padding(self):
        """Tests that padded phonemes add no frames"""
        hidden = torch.arange(6.0).reshape(2, 3, 1)
        out, lengths = length_regulate_batch(
            hidden,
            torch.tensor([[1, 2, 1], [3, 1, 0]]),
            torch.tensor([[True, True, True], [True, True, False]]),
        )
        self.assertEqual([4, 4], lengths.tolist())
        self.assertEqual([0.0, 1.0, 1.0, 2.0], out[0, :, 0].tolist())
        self.assertEqual([3.0, 3.0, 3.0, 4.0], out[1, :, 0].tolist())

    def test_batch_pads_to_max_frames(self):
        """Tests zero padding up to a requested frame count"""
        out, lengths = length_regulate_batch(
            torch.ones(1, 2, 3),
            torch.tensor([[1, 1]]),
            torch.tensor([[True, True]]),
            max_frames=5,
        )
        self.assertEqual((1, 5, 3), tuple(out.shape))
        self.assertEqual([2], lengths.tolist())
        self.assertEqual(0.0, float(out[0, 2:].abs().sum()))


class TestTxt2Vec(unittest.TestCase):
    """Tests for the Txt2Vec model"""

    def setUp(self):
        """Fresh model"""
        torch.manual_seed(0)
        self.model = Txt2Vec(SMALL_TXT2VEC)

    def test_forward_shapes(self):
        """Tests logits, variance and style shapes"""
        outputs = self.model(small_batch())
        self.assertEqual((2, 6, 8), tuple(outputs.logits.shape))
        self.assertEqual((2, 3), tuple(outputs.variances.pitch.shape))
        self.assertEqual((2, 3), tuple(outputs.variances.duration.shape))
        self.assertEqual((2, 16), tuple(outputs.style.shape))
        self.assertEqual(0.0, float(outputs.variances.energy[1, 2]))

    def test_initial_cross_entropy(self):
        """Tests that the untrained decoder predicts a uniform unit"""
        losses = batch_loss(self.model, small_batch())
        self.assertAlmostEqual(
            math.log(8), float(losses["unit_ce"]), delta=1e-5
        )
        self.assertAlmostEqual(
            float(
                losses["unit_ce"]
                + losses["pitch_mse"]
                + losses["energy_mse"]
                + losses["duration_mse"]
            ),
            float(losses["total"]),
            delta=1e-5,
        )

    def test_invalid_phoneme_id(self):
        """Tests that ids outside the vocabulary name their position"""
        batch = small_batch()
        batch.phoneme_ids[0, 2] = 10
        with self.assertRaises(ConfigurationError) as e:
            self.model(batch)
        self.assertIn("position 2", str(e.exception))

    def test_invalid_language_id(self):
        """Tests that unknown languages are rejected"""
        batch = small_batch()
        batch.language_ids[1] = 2
        with self.assertRaises(ConfigurationError):
            self.model(batch)

    def test_empty_reference_mel(self):
        """Tests that a reference mel needs at least one frame"""
        with self.assertRaises(ValueError):
            self.model.mel_style_encode(torch.zeros(1, 0, 16))
        with self.assertRaises(ValueError):
            self.model.mel_style_encode(
                torch.zeros(1, 4, 16), torch.tensor([0])
            )

    def test_style_ignores_padded_frames(self):
        """Tests that frames past the reference length do not matter"""
        self.model.eval()
        mel = torch.randn(1, 9, 16)
        altered = mel.clone()
        altered[:, 5:] = 100.0
        lengths = torch.tensor([5])
        with torch.no_grad():
            torch.testing.assert_close(
                self.model.mel_style_encode(mel, lengths),
                self.model.mel_style_encode(altered, lengths),
            )

    def test_infer_requires_training(self):
        """Tests that an untrained model refuses to infer"""
        with self.assertRaises(CheckpointError):
            self.model.infer([1, 2], 0, np.zeros((5, 16)))

    def test_infer(self):
        """Tests that unit count equals the sum of predicted durations"""
        model = load_txt2vec_state(
            SMALL_TXT2VEC, self.model.state_dict(), trained=True
        )
        prediction = model.infer([1, 2, 3], 1, np.zeros((5, 16)), 128)
        self.assertEqual(3, prediction.durations.size)
        self.assertTrue(np.all(prediction.durations >= 1))
        total = int(prediction.durations.sum())
        self.assertEqual(total, len(prediction.units))
        self.assertEqual(128, prediction.units.frame_hop)
        self.assertEqual(total, prediction.pitch_frames.size)
        self.assertEqual(total, prediction.energy_frames.size)
        self.assertEqual((16,), prediction.style.shape)

    def test_gradient_check(self):
        """Tests autograd against central differences on 100 parameters"""
        torch.manual_seed(1)
        model = Txt2Vec(SMALL_TXT2VEC).double()
        model.train()
        torch.nn.init.normal_(model.decoder.output.weight, std=0.3)
        torch.nn.init.normal_(model.decoder.output.bias, std=0.3)
        batch = small_batch(torch.float64)

        def loss_fn() -> torch.Tensor:
            """Total txt2vec loss"""
            return batch_loss(model, batch)["total"]

        self.assertLessEqual(finite_difference_error(loss_fn, model), 1e-3)


class TestTxt2VecLoss(unittest.TestCase):
    """Tests for txt2vec_loss"""

    def test_masked_terms(self):
        """Tests that padded phonemes and frames are excluded"""
        logits = torch.zeros(1, 3, 4)
        logits[0, 0, 2] = 50.0
        logits[0, 1, 1] = 50.0
        predicted = VarianceValues(
            pitch=torch.tensor([[1.0, 5.0]]),
            energy=torch.tensor([[0.0, 5.0]]),
            duration=torch.tensor([[2.0, 5.0]]),
        )
        targets = VarianceValues(
            pitch=torch.tensor([[0.0, 0.0]]),
            energy=torch.tensor([[0.0, 0.0]]),
            duration=torch.tensor([[0.0, 0.0]]),
        )
        losses = txt2vec_loss(
            logits,
            torch.tensor([[2, 1, 3]]),
            predicted,
            targets,
            frame_mask=torch.tensor([[True, True, False]]),
            phoneme_mask=torch.tensor([[True, False]]),
        )
        self.assertAlmostEqual(0.0, float(losses["unit_ce"]), delta=1e-6)
        self.assertAlmostEqual(1.0, float(losses["pitch_mse"]))
        self.assertAlmostEqual(0.0, float(losses["energy_mse"]))
        self.assertAlmostEqual(4.0, float(losses["duration_mse"]))
        self.assertAlmostEqual(5.0, float(losses["total"]), delta=1e-6)


if __name__ == "__main__":
    unittest.main()
