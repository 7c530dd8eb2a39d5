"""Unit test package for meshmotion."""
