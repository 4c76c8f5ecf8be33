import contextlib
import io
import os
import tempfile
import unittest

import pandas as pd

from cli import main, EXIT_OK, EXIT_USAGE
from util import derive_seed

SMALL_RUN = ["terrain.kinds=flat", "train.num_envs=4", "train.env_chunk=2", "train.steps_per_batch=4",
             "train.student_steps_per_batch=4", "train.epochs=2", "train.student_epochs=2", "train.update_epochs=1",
             "train.mini_batches=1", "train.imu_hidden=(8,)", "train.trunk_hidden=(16, 16)", "train.belief_hidden=8",
             "eval.inclines_deg=[70.0]", "eval.radii_m=[0.025]", "eval.agents_per_cell=2", "eval.ladder_set_size=2",
             "eval.timeout_s=0.5", "eval.disturbances=False"]


class TestCli(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.out = self.tmp.name

    def tearDown(self):
        self.tmp.cleanup()

    def run_cli(self, *argv: str, settings=()) -> tuple[int, str]:
        args = list(argv) + ["--out", self.out]
        for setting in settings:
            args += ["--set", setting]
        stderr = io.StringIO()
        with contextlib.redirect_stderr(stderr), contextlib.redirect_stdout(io.StringIO()):
            code = main(args)
        return code, stderr.getvalue()

    def test_unknown_command(self):
        code, _ = self.run_cli("fly")
        self.assertEqual(code, EXIT_USAGE)

    def test_unknown_key_is_a_usage_error(self):
        code, err = self.run_cli("gen-terrain", settings=["train.numenvs=4"])
        self.assertEqual(code, EXIT_USAGE)
        self.assertIn("train.num_envs", err)

    def test_eval_without_checkpoint(self):
        code, err = self.run_cli("eval")
        self.assertEqual(code, EXIT_USAGE)
        self.assertIn("laddergym eval", err)

    def test_gen_terrain(self):
        code, _ = self.run_cli("gen-terrain", "--seed", "5", settings=["run.tag=t"])
        self.assertEqual(code, EXIT_OK)
        run_dir = os.path.join(self.out, "gen-terrain_t")
        self.assertTrue(os.path.exists(os.path.join(run_dir, "config.echo")))
        index = pd.read_csv(os.path.join(run_dir, "terrain", "index.csv"))
        self.assertEqual(len(index), 5)
        self.assertEqual(list(index["seed"]), [derive_seed(5, 3, k) for k in range(5)])
        for name in index["file"]:
            self.assertTrue(os.path.exists(os.path.join(run_dir, "terrain", name)))

    def test_train_distill_eval(self):
        code, _ = self.run_cli("train-teacher", settings=SMALL_RUN + ["run.tag=teacher"])
        self.assertEqual(code, EXIT_OK)
        teacher_dir = os.path.join(self.out, "train-teacher_teacher")
        self.assertEqual(len(pd.read_csv(os.path.join(teacher_dir, "metrics.csv"))), 2)
        teacher = os.path.join(teacher_dir, "ckpt", "teacher.ckpt")

        code, _ = self.run_cli("distill", "--checkpoint", teacher, settings=SMALL_RUN + ["run.tag=student"])
        self.assertEqual(code, EXIT_OK)
        student = os.path.join(self.out, "distill_student", "ckpt", "student.ckpt")
        self.assertTrue(os.path.exists(student))

        code, _ = self.run_cli("eval", "--checkpoint", student, settings=SMALL_RUN + ["run.tag=eval"])
        self.assertEqual(code, EXIT_OK)
        eval_dir = os.path.join(self.out, "eval_eval", "eval")
        for name in ("grid_hook.csv", "grid_hook.svg", "trajectory_hook.txt"):
            self.assertTrue(os.path.exists(os.path.join(eval_dir, name)), name)

    def test_resume_needs_an_existing_checkpoint(self):
        code, err = self.run_cli("train-teacher", "--resume", os.path.join(self.out, "absent.ckpt"), settings=SMALL_RUN)
        self.assertEqual(code, EXIT_USAGE)
        self.assertIn("absent.ckpt", err)

    def test_distill_needs_a_teacher(self):
        code, err = self.run_cli("distill", settings=SMALL_RUN)
        self.assertEqual(code, EXIT_USAGE)
        self.assertIn("teacher checkpoint", err)


if __name__ == "__main__":
    unittest.main()
