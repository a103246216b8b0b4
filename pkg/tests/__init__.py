"""Test suite for Device Tuning"""
