"""Device Tuning - split transformer toolkit"""
