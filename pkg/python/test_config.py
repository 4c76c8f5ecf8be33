import os
import tempfile
import unittest
from unittest import mock

from config import CONFIG_DIR, RunConfig, parse_config, apply_setting, echo_config, known_keys, validate, OUTPUT_ENV_VAR
from errors import ConfigError, MissingArtifactError
from models import EndEffector


class TestParseConfig(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "run.cfg")

    def tearDown(self):
        self.tmp.cleanup()

    def write(self, *lines: str):
        with open(self.path, "w") as file:
            file.write("\n".join(lines) + "\n")

    def test_empty_file_gives_defaults(self):
        self.write("", "# nothing here")
        config = parse_config(self.path)
        self.assertEqual(config.train, RunConfig().train)
        self.assertEqual(set(config.provenance.values()), {"default"})
        self.assertEqual(set(config.provenance), set(known_keys()))

    def test_precedence_and_provenance(self):
        self.write("train.num_envs = 256  # from the profile", "train.clip = 0.1", 'run.tag = "a # b"')
        config = parse_config(self.path, ["train.num_envs=128"])
        self.assertEqual(config.train.num_envs, 128)
        self.assertEqual(config.train.clip, 0.1)
        self.assertEqual(config.run.tag, "a # b")
        self.assertEqual(config.provenance["train.num_envs"], "flag")
        self.assertEqual(config.provenance["train.clip"], "file")
        self.assertEqual(config.provenance["train.discount"], "default")

    def test_unknown_key_suggests_closest(self):
        self.write("train.numenvs = 4")
        with self.assertRaises(ConfigError) as ctx:
            parse_config(self.path)
        message = str(ctx.exception)
        self.assertIn("train.num_envs", message)
        self.assertIn(f"{self.path}:1:", message)

    def test_type_mismatch(self):
        with self.assertRaises(ConfigError) as ctx:
            parse_config(None, ["train.num_envs=abc"])
        self.assertIn("expected int", str(ctx.exception))
        with self.assertRaises(ConfigError):
            parse_config(None, ["train.use_height_scan=1"])

    def test_coercions(self):
        config = parse_config(None, ["train.trunk_hidden=(16, 16)", "train.learning_rate=1", "train.epochs=3.0",
                                     "eval.inclines_deg=[70, 90]", "robot.end_effector=hook"])
        self.assertEqual(config.train.trunk_hidden, (16.0, 16.0))
        self.assertIsInstance(config.train.learning_rate, float)
        self.assertEqual(config.train.epochs, 3)
        self.assertEqual(config.eval.inclines_deg, [70.0, 90.0])
        self.assertEqual(config.robot.model().end_effector, EndEffector.HOOK)

    def test_missing_assignment(self):
        self.write("train.num_envs 4")
        with self.assertRaises(ConfigError):
            parse_config(self.path)

    def test_missing_file(self):
        with self.assertRaises(MissingArtifactError):
            parse_config(os.path.join(self.tmp.name, "absent.cfg"))

    def test_profile_alias_and_bare_names(self):
        full = parse_config(os.path.join(CONFIG_DIR, "full.cfg"))
        for name in (os.path.join(CONFIG_DIR, "paper.cfg"), "paper", "full"):
            with self.subTest(name=name):
                config = parse_config(name)
                self.assertEqual({k: config.get(k) for k in known_keys()}, {k: full.get(k) for k in known_keys()})
        desk = parse_config("desk")
        self.assertEqual(desk.train, parse_config(os.path.join(CONFIG_DIR, "desk.cfg")).train)

    def test_alias_needs_its_target(self):
        with self.assertRaises(MissingArtifactError):
            parse_config(os.path.join(self.tmp.name, "paper.cfg"))
        self.write("train.epochs = 7")
        os.rename(self.path, os.path.join(self.tmp.name, "full.cfg"))
        self.assertEqual(parse_config(os.path.join(self.tmp.name, "paper.cfg")).train.epochs, 7)

    def test_validation(self):
        with self.assertRaises(ConfigError):
            parse_config(None, ["train.clip=1.5"])
        with self.assertRaises(ConfigError):
            parse_config(None, ["eval.policy=greedy"])
        with self.assertRaises(ConfigError):
            parse_config(None, ["train.threshold_end=(0.1, 0.1)"])
        config = RunConfig()
        apply_setting(config, "train.num_envs", "0", "flag")
        with self.assertRaises(ConfigError):
            validate(config)

    def test_echo_lists_every_key_with_origin(self):
        config = parse_config(None, ["run.seed=7"])
        echo = os.path.join(self.tmp.name, "config.echo")
        echo_config(config, echo)
        with open(echo) as file:
            lines = file.read().splitlines()
        self.assertEqual(len(lines), len(known_keys()))
        self.assertIn("run.seed = 7  # flag", lines)
        self.assertIn("train.clip = 0.2  # default", lines)


class TestOutputRoot(unittest.TestCase):

    def test_flag_then_environment_then_default(self):
        config = RunConfig()
        with mock.patch.dict(os.environ, {OUTPUT_ENV_VAR: ""}):
            self.assertEqual(config.output_root(), "Output")
        with mock.patch.dict(os.environ, {OUTPUT_ENV_VAR: "/tmp/ladders"}):
            self.assertEqual(config.output_root(), "/tmp/ladders")
            apply_setting(config, "run.out", "'/data/runs'", "flag")
            self.assertEqual(config.output_root(), "/data/runs")


if __name__ == "__main__":
    unittest.main()
