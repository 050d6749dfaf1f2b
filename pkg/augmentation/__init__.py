"""View generators and Dataset adapters for the teacher and student paths"""
